//! Deterministic shapes-and-colors VQA task.
//!
//! Each example pairs a 3x32x32 image of 1-3 non-overlapping colored shapes
//! with a templated question, the answer, per-token coarse POS tags, and a
//! pixel-level relevance mask marking the referenced object (all ones for
//! existence questions answered "no"). The mask stands in for a human
//! judgment of which region answers the question.

use crate::error::{Error, Result};
use crate::model::{IMAGE_CHANNELS, IMAGE_SIDE};
use crate::tensor::Tensor;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Coarse part-of-speech inventory; one fixed tag per vocabulary word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PosTag {
    WhWord,
    Noun,
    Adjective,
    Verb,
    Determiner,
    Other,
}

pub const PAD_TOKEN: usize = 0;

#[derive(Debug, Clone)]
pub struct VqaExample {
    pub id: u64,
    /// [3, 32, 32], values in [0, 1].
    pub image: Tensor,
    pub question: Vec<usize>,
    pub pos_tags: Vec<PosTag>,
    pub answer: usize,
    /// 32x32 row-major, 1.0 on the referenced object's pixels.
    pub relevance_mask: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vec<String>,
    pub answers: Vec<String>,
    pub pos: BTreeMap<String, PosTag>,
    pub examples: Vec<VqaExample>,
}

impl Dataset {
    pub fn token(&self, word: &str) -> Option<usize> {
        self.vocab.iter().position(|w| w == word)
    }

    pub fn answer_index(&self, answer: &str) -> Option<usize> {
        self.answers.iter().position(|a| a == answer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ShapeColor {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ShapeKind {
    const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl ShapeColor {
    const ALL: [ShapeColor; 4] = [
        ShapeColor::Red,
        ShapeColor::Green,
        ShapeColor::Blue,
        ShapeColor::Yellow,
    ];

    fn word(self) -> &'static str {
        match self {
            ShapeColor::Red => "red",
            ShapeColor::Green => "green",
            ShapeColor::Blue => "blue",
            ShapeColor::Yellow => "yellow",
        }
    }

    fn rgb(self) -> [f32; 3] {
        match self {
            ShapeColor::Red => [1.0, 0.0, 0.0],
            ShapeColor::Green => [0.0, 1.0, 0.0],
            ShapeColor::Blue => [0.0, 0.0, 1.0],
            ShapeColor::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct PlacedShape {
    pub kind: ShapeKind,
    pub color: ShapeColor,
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl PlacedShape {
    /// Raster pixels of the shape, all inside its size x size bounding box.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        let s = self.size;
        let mut out = Vec::new();
        match self.kind {
            ShapeKind::Square => {
                for dy in 0..s {
                    for dx in 0..s {
                        out.push((self.x + dx, self.y + dy));
                    }
                }
            }
            ShapeKind::Circle => {
                let c = (s as f32 - 1.0) / 2.0;
                let r2 = (s as f32 / 2.0) * (s as f32 / 2.0);
                for dy in 0..s {
                    for dx in 0..s {
                        let ddx = dx as f32 - c;
                        let ddy = dy as f32 - c;
                        if ddx * ddx + ddy * ddy <= r2 {
                            out.push((self.x + dx, self.y + dy));
                        }
                    }
                }
            }
            ShapeKind::Triangle => {
                // Filled isoceles wedge, apex up, base s and height s/2:
                // low and wide, so its footprint reads differently from the
                // square at any size in range.
                let c = (s as f32 - 1.0) / 2.0;
                let h = s.div_ceil(2);
                for dy in 0..h {
                    let half = (dy as f32 + 1.0) / h as f32 * (s as f32 / 2.0);
                    for dx in 0..s {
                        if (dx as f32 - c).abs() <= half {
                            out.push((self.x + dx, self.y + dy));
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum Template {
    WhatColor,
    WhatShape,
    IsThere,
}

pub(crate) struct Scene {
    pub shapes: Vec<PlacedShape>,
    /// Index of the referenced shape, if the question refers to one.
    pub target: Option<usize>,
}

fn vocabulary() -> (Vec<String>, BTreeMap<String, PosTag>) {
    let words = [
        ("<pad>", PosTag::Other),
        ("what", PosTag::WhWord),
        ("color", PosTag::Noun),
        ("is", PosTag::Verb),
        ("the", PosTag::Determiner),
        ("square", PosTag::Noun),
        ("circle", PosTag::Noun),
        ("triangle", PosTag::Noun),
        ("shape", PosTag::Noun),
        ("there", PosTag::Other),
        ("a", PosTag::Determiner),
        ("red", PosTag::Adjective),
        ("green", PosTag::Adjective),
        ("blue", PosTag::Adjective),
        ("yellow", PosTag::Adjective),
    ];
    let vocab: Vec<String> = words.iter().map(|(w, _)| w.to_string()).collect();
    let pos = words.iter().map(|(w, t)| (w.to_string(), *t)).collect();
    (vocab, pos)
}

fn answer_inventory() -> Vec<String> {
    ["red", "green", "blue", "yellow", "square", "circle", "triangle", "yes", "no"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

const MIN_SHAPE: usize = 6;
const MAX_SHAPE: usize = 10;
const PLACEMENT_RETRIES: usize = 50;

fn boxes_clash(a: &PlacedShape, b: &PlacedShape) -> bool {
    // Bounding boxes expanded by one pixel must stay disjoint.
    let (ax0, ay0) = (a.x as isize - 1, a.y as isize - 1);
    let (ax1, ay1) = ((a.x + a.size) as isize, (a.y + a.size) as isize);
    let (bx0, by0) = (b.x as isize, b.y as isize);
    let (bx1, by1) = ((b.x + b.size) as isize - 1, (b.y + b.size) as isize - 1);
    ax0 <= bx1 && bx0 <= ax1 && ay0 <= by1 && by0 <= ay1
}

/// Place a shape of the given kind/color without overlap; `None` when every
/// retry collides (the caller then simply keeps fewer shapes).
fn try_place(
    rng: &mut ChaCha8Rng,
    placed: &[PlacedShape],
    kind: ShapeKind,
    color: ShapeColor,
) -> Option<PlacedShape> {
    for _ in 0..PLACEMENT_RETRIES {
        let size = rng.gen_range(MIN_SHAPE..=MAX_SHAPE);
        let max_pos = IMAGE_SIDE - size - 1;
        let x = rng.gen_range(1..=max_pos);
        let y = rng.gen_range(1..=max_pos);
        let candidate = PlacedShape { kind, color, x, y, size };
        if placed.iter().all(|p| !boxes_clash(&candidate, p)) {
            return Some(candidate);
        }
    }
    None
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, options: &[T]) -> T {
    options[rng.gen_range(0..options.len())]
}

/// Distractor count for a scene (the referenced object comes on top).
fn sample_extras(rng: &mut ChaCha8Rng) -> usize {
    let _ = rng;
    0 // EXP-1
}

fn generate_scene_and_question(
    rng: &mut ChaCha8Rng,
    vocab: &[String],
    answers: &[String],
) -> (Scene, Vec<usize>, usize) {
    let tok = |w: &str| vocab.iter().position(|v| v == w).expect("vocab word");
    let ans = |w: &str| answers.iter().position(|a| a == w).expect("answer word");
    let template = match rng.gen_range(0..3u32) {
        0 => Template::WhatColor,
        1 => Template::WhatShape,
        _ => Template::IsThere,
    };

    match template {
        Template::WhatColor => {
            let kind = pick(rng, &ShapeKind::ALL);
            let color = pick(rng, &ShapeColor::ALL);
            let mut shapes = Vec::new();
            shapes.push(try_place(rng, &shapes, kind, color).expect("first placement"));
            let extras = sample_extras(rng);
            for _ in 0..extras {
                let others: Vec<ShapeKind> =
                    ShapeKind::ALL.into_iter().filter(|k| *k != kind).collect();
                let dk = pick(rng, &others);
                let dc = pick(rng, &ShapeColor::ALL);
                if let Some(p) = try_place(rng, &shapes, dk, dc) {
                    shapes.push(p);
                }
            }
            let question = vec![tok("what"), tok("color"), tok("is"), tok("the"), tok(kind.word())];
            let answer = ans(color.word());
            (Scene { shapes, target: Some(0) }, question, answer)
        }
        Template::WhatShape => {
            let kind = pick(rng, &ShapeKind::ALL);
            let color = pick(rng, &ShapeColor::ALL);
            let mut shapes = Vec::new();
            shapes.push(try_place(rng, &shapes, kind, color).expect("first placement"));
            let extras = sample_extras(rng);
            for _ in 0..extras {
                let others: Vec<ShapeColor> =
                    ShapeColor::ALL.into_iter().filter(|c| *c != color).collect();
                let dc = pick(rng, &others);
                let dk = pick(rng, &ShapeKind::ALL);
                if let Some(p) = try_place(rng, &shapes, dk, dc) {
                    shapes.push(p);
                }
            }
            let question = vec![tok("what"), tok("shape"), tok("is"), tok(color.word())];
            let answer = ans(kind.word());
            (Scene { shapes, target: Some(0) }, question, answer)
        }
        Template::IsThere => {
            let kind = pick(rng, &ShapeKind::ALL);
            let color = pick(rng, &ShapeColor::ALL);
            let present = rng.gen_bool(0.5);
            let mut shapes: Vec<PlacedShape> = Vec::new();
            let target = if present {
                shapes.push(try_place(rng, &shapes, kind, color).expect("first placement"));
                let extras = sample_extras(rng);
                for _ in 0..extras {
                    let (dk, dc) = loop {
                        let dk = pick(rng, &ShapeKind::ALL);
                        let dc = pick(rng, &ShapeColor::ALL);
                        if dk != kind || dc != color {
                            break (dk, dc);
                        }
                    };
                    if let Some(p) = try_place(rng, &shapes, dk, dc) {
                        shapes.push(p);
                    }
                }
                Some(0)
            } else {
                let total = 1 + sample_extras(rng);
                for _ in 0..total {
                    let (dk, dc) = loop {
                        let dk = pick(rng, &ShapeKind::ALL);
                        let dc = pick(rng, &ShapeColor::ALL);
                        if dk != kind || dc != color {
                            break (dk, dc);
                        }
                    };
                    if let Some(p) = try_place(rng, &shapes, dk, dc) {
                        shapes.push(p);
                    }
                }
                None
            };
            let question = vec![tok("is"), tok("there"), tok("a"), tok(color.word()), tok(kind.word())];
            let answer = if present { ans("yes") } else { ans("no") };
            (Scene { shapes, target }, question, answer)
        }
    }
}

fn render(rng: &mut ChaCha8Rng, scene: &Scene) -> (Tensor, Vec<f32>) {
    let hw = IMAGE_SIDE * IMAGE_SIDE;
    let mut image = vec![0.0f32; IMAGE_CHANNELS * hw];
    for shape in &scene.shapes {
        let rgb = shape.color.rgb();
        for (px, py) in shape.pixels() {
            for (c, &v) in rgb.iter().enumerate() {
                image[c * hw + py * IMAGE_SIDE + px] = v;
            }
        }
    }
    for v in image.iter_mut() {
        let noise: f32 = rng.gen_range(-0.05..0.05);
        *v = (*v + noise).clamp(0.0, 1.0);
    }
    let mut mask = vec![0.0f32; hw];
    match scene.target {
        Some(t) => {
            for (px, py) in scene.shapes[t].pixels() {
                mask[py * IMAGE_SIDE + px] = 1.0;
            }
        }
        None => mask.fill(1.0),
    }
    (
        Tensor::new(vec![IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], image).expect("image shape"),
        mask,
    )
}

pub(crate) fn generate_with_scenes(count: usize, seed: u64) -> Result<(Dataset, Vec<Scene>)> {
    if count == 0 {
        return Err(Error::InvalidArgument {
            op: "generate_dataset",
            reason: "count must be positive".into(),
        });
    }
    let (vocab, pos) = vocabulary();
    let answers = answer_inventory();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(count);
    let mut scenes = Vec::with_capacity(count);
    for id in 0..count {
        let (scene, question, answer) = generate_scene_and_question(&mut rng, &vocab, &answers);
        let (image, relevance_mask) = render(&mut rng, &scene);
        let pos_tags = question.iter().map(|&t| pos[&vocab[t]]).collect();
        examples.push(VqaExample {
            id: id as u64,
            image,
            question,
            pos_tags,
            answer,
            relevance_mask,
        });
        scenes.push(scene);
    }
    Ok((
        Dataset {
            vocab,
            answers,
            pos,
            examples,
        },
        scenes,
    ))
}

/// Deterministic dataset generation: identical seeds yield bit-identical
/// datasets.
pub fn generate_dataset(count: usize, seed: u64) -> Result<Dataset> {
    generate_with_scenes(count, seed).map(|(d, _)| d)
}

/// Recompute the answer from the scene alone; the generator must always
/// agree with this rule-based reading of the question.
#[cfg(test)]
pub(crate) fn oracle_answer(ds: &Dataset, question: &[usize], scene: &Scene) -> Option<usize> {
    let word = |t: usize| ds.vocab[t].as_str();
    let kind_of = |w: &str| ShapeKind::ALL.into_iter().find(|k| k.word() == w);
    let color_of = |w: &str| ShapeColor::ALL.into_iter().find(|c| c.word() == w);
    let words: Vec<&str> = question.iter().map(|&t| word(t)).collect();
    match words.as_slice() {
        ["what", "color", "is", "the", k] => {
            let kind = kind_of(k)?;
            let found: Vec<_> = scene.shapes.iter().filter(|s| s.kind == kind).collect();
            if found.len() != 1 {
                return None;
            }
            ds.answer_index(found[0].color.word())
        }
        ["what", "shape", "is", c] => {
            let color = color_of(c)?;
            let found: Vec<_> = scene.shapes.iter().filter(|s| s.color == color).collect();
            if found.len() != 1 {
                return None;
            }
            ds.answer_index(found[0].kind.word())
        }
        ["is", "there", "a", c, k] => {
            let color = color_of(c)?;
            let kind = kind_of(k)?;
            let present = scene.shapes.iter().any(|s| s.color == color && s.kind == kind);
            ds.answer_index(if present { "yes" } else { "no" })
        }
        _ => None,
    }
}

// ── JSON-lines serialization ─────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    vocab: Vec<String>,
    answers: Vec<String>,
    pos: BTreeMap<String, PosTag>,
}

#[derive(Serialize, Deserialize)]
struct ExampleLine {
    id: u64,
    image: String,
    question: Vec<usize>,
    answer: usize,
    mask: String,
}

fn encode_f32s(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_f32s(s: &str, expected: usize, index: usize, field: &str) -> Result<Vec<f32>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::DatasetRecord {
            index,
            reason: format!("{field}: {e}"),
        })?;
    if bytes.len() != expected * 4 {
        return Err(Error::DatasetRecord {
            index,
            reason: format!("{field}: expected {} bytes, got {}", expected * 4, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = HeaderLine {
        vocab: ds.vocab.clone(),
        answers: ds.answers.clone(),
        pos: ds.pos.clone(),
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::other)?;
    out.write_all(b"\n")?;
    for ex in &ds.examples {
        let line = ExampleLine {
            id: ex.id,
            image: encode_f32s(ex.image.data()),
            question: ex.question.clone(),
            answer: ex.answer,
            mask: encode_f32s(&ex.relevance_mask),
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let mut offset = 0u64;
    let mut lines = Vec::new(); // (byte offset, slice)
    let mut start = 0usize;
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'\n' {
            lines.push((offset, &bytes[start..i]));
            start = i + 1;
            offset = start as u64;
        }
    }
    if start < bytes.len() {
        // Trailing bytes with no terminating newline: an interrupted write.
        return Err(Error::DatasetTruncated {
            offset: start as u64,
            reason: "final record is not newline-terminated".into(),
        });
    }
    let Some(&(_, header_bytes)) = lines.first() else {
        return Err(Error::DatasetHeader {
            reason: "empty file".into(),
        });
    };
    let header: HeaderLine =
        serde_json::from_slice(header_bytes).map_err(|e| Error::DatasetHeader {
            reason: e.to_string(),
        })?;

    let hw = IMAGE_SIDE * IMAGE_SIDE;
    let mut examples = Vec::with_capacity(lines.len().saturating_sub(1));
    for (index, &(off, line)) in lines.iter().skip(1).enumerate() {
        if line.is_empty() {
            return Err(Error::DatasetTruncated {
                offset: off,
                reason: "empty record line".into(),
            });
        }
        let rec: ExampleLine = serde_json::from_slice(line).map_err(|e| Error::DatasetRecord {
            index,
            reason: e.to_string(),
        })?;
        let image = decode_f32s(&rec.image, IMAGE_CHANNELS * hw, index, "image")?;
        let mask = decode_f32s(&rec.mask, hw, index, "mask")?;
        if rec.question.is_empty() || rec.question.len() > crate::model::MAX_QUESTION_LEN {
            return Err(Error::DatasetRecord {
                index,
                reason: format!("question length {}", rec.question.len()),
            });
        }
        if let Some(&bad) = rec.question.iter().find(|&&t| t >= header.vocab.len()) {
            return Err(Error::DatasetRecord {
                index,
                reason: format!("token {bad} out of vocabulary"),
            });
        }
        if rec.answer >= header.answers.len() {
            return Err(Error::DatasetRecord {
                index,
                reason: format!("answer {} out of inventory", rec.answer),
            });
        }
        let pos_tags = rec
            .question
            .iter()
            .map(|&t| {
                header.pos.get(&header.vocab[t]).copied().ok_or_else(|| Error::DatasetRecord {
                    index,
                    reason: format!("no POS tag for '{}'", header.vocab[t]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        examples.push(VqaExample {
            id: rec.id,
            image: Tensor::new(vec![IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], image)?,
            question: rec.question,
            pos_tags,
            answer: rec.answer,
            relevance_mask: mask,
        });
    }
    Ok(Dataset {
        vocab: header.vocab,
        answers: header.answers,
        pos: header.pos,
        examples,
    })
}
