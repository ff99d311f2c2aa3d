//! The toy two-pathway VQA classifier.
//!
//! Image pathway: conv -> ReLU -> avgpool -> conv -> ReLU -> avgpool ->
//! linear projection to 64 dims. Question pathway: bag of summed word
//! embeddings -> linear -> tanh, deliberately free of ReLUs so its input
//! gradients are exact in both backward modes. Fusion: elementwise product,
//! then a one-hidden-layer MLP head (ReLU) and a softmax over answers.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tape::{ReluMode, Tape, ValueId};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIDE: usize = 32;
pub const MAX_QUESTION_LEN: usize = 8;
pub const EMBED_DIM: usize = 16;
pub const HIDDEN_DIM: usize = 64;

const CONV1_OUT: usize = 8;
const CONV2_OUT: usize = 16;
const FLAT_DIM: usize = CONV2_OUT * (IMAGE_SIDE / 4) * (IMAGE_SIDE / 4); // 1024

/// Softmax answer distribution with a deterministic argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerDistribution {
    pub probabilities: Vec<f32>,
    /// Argmax index; ties resolve to the lowest index.
    pub predicted: usize,
    pub predicted_prob: f32,
}

impl AnswerDistribution {
    pub fn from_probabilities(probabilities: Vec<f32>) -> Self {
        let mut predicted = 0;
        let mut best = probabilities[0];
        for (i, &p) in probabilities.iter().enumerate().skip(1) {
            if p > best {
                best = p;
                predicted = i;
            }
        }
        AnswerDistribution {
            predicted,
            predicted_prob: best,
            probabilities,
        }
    }
}

/// Tape positions of everything attribution and training need to reach.
pub struct ForwardIds {
    /// Parameter leaves, aligned with [`VqaModel::PARAM_NAMES`].
    pub params: Vec<ValueId>,
    pub image: ValueId,
    /// Output of the embedding lookup, one row per question token.
    pub embed_rows: ValueId,
    pub question_embedding: ValueId,
    pub image_embedding: ValueId,
    pub fused: ValueId,
    pub logits: ValueId,
    pub probabilities: ValueId,
}

/// A full recorded forward pass.
pub struct ForwardPass {
    pub dist: AnswerDistribution,
    pub tape: Tape<f32>,
    pub ids: ForwardIds,
}

/// Parameters of the classifier. All tensors stay finite; the question
/// pathway contains no ReLU by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct VqaModel {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub img_proj_w: Tensor,
    pub img_proj_b: Tensor,
    pub word_embed: Tensor,
    pub q_proj_w: Tensor,
    pub q_proj_b: Tensor,
    pub fuse1_w: Tensor,
    pub fuse1_b: Tensor,
    pub fuse2_w: Tensor,
    pub fuse2_b: Tensor,
    pub vocab_size: usize,
    pub answer_count: usize,
    /// Per-channel mean of the training images, recorded by training and
    /// carried in checkpoints as the default occlusion patch color.
    pub train_mean_rgb: Option<[f32; 3]>,
}

fn xavier(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-s..s)).collect();
    Tensor::new(shape, data).expect("init shape")
}

impl VqaModel {
    pub const PARAM_NAMES: [&'static str; 13] = [
        "conv1.weight",
        "conv1.bias",
        "conv2.weight",
        "conv2.bias",
        "img_proj.weight",
        "img_proj.bias",
        "word_embed",
        "q_proj.weight",
        "q_proj.bias",
        "fuse1.weight",
        "fuse1.bias",
        "fuse2.weight",
        "fuse2.bias",
    ];

    /// Seeded Xavier-uniform initialization; biases start at zero.
    pub fn new(vocab_size: usize, answer_count: usize, seed: u64) -> Result<Self> {
        if vocab_size == 0 || answer_count < 2 {
            return Err(Error::InvalidArgument {
                op: "model init",
                reason: format!("vocab_size {vocab_size}, answer_count {answer_count}"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 3 * 3;
        Ok(VqaModel {
            conv1_w: xavier(
                &mut rng,
                vec![CONV1_OUT, IMAGE_CHANNELS, 3, 3],
                IMAGE_CHANNELS * k,
                CONV1_OUT * k,
            ),
            conv1_b: Tensor::zeros(vec![CONV1_OUT]),
            conv2_w: xavier(
                &mut rng,
                vec![CONV2_OUT, CONV1_OUT, 3, 3],
                CONV1_OUT * k,
                CONV2_OUT * k,
            ),
            conv2_b: Tensor::zeros(vec![CONV2_OUT]),
            img_proj_w: xavier(&mut rng, vec![HIDDEN_DIM, FLAT_DIM], FLAT_DIM, HIDDEN_DIM),
            img_proj_b: Tensor::zeros(vec![HIDDEN_DIM]),
            word_embed: xavier(&mut rng, vec![vocab_size, EMBED_DIM], vocab_size, EMBED_DIM),
            q_proj_w: xavier(&mut rng, vec![HIDDEN_DIM, EMBED_DIM], EMBED_DIM, HIDDEN_DIM),
            q_proj_b: Tensor::zeros(vec![HIDDEN_DIM]),
            fuse1_w: xavier(&mut rng, vec![HIDDEN_DIM, HIDDEN_DIM], HIDDEN_DIM, HIDDEN_DIM),
            fuse1_b: Tensor::zeros(vec![HIDDEN_DIM]),
            fuse2_w: xavier(&mut rng, vec![answer_count, HIDDEN_DIM], HIDDEN_DIM, answer_count),
            fuse2_b: Tensor::zeros(vec![answer_count]),
            vocab_size,
            answer_count,
            train_mean_rgb: None,
        })
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        Self::PARAM_NAMES
            .into_iter()
            .zip([
                &self.conv1_w,
                &self.conv1_b,
                &self.conv2_w,
                &self.conv2_b,
                &self.img_proj_w,
                &self.img_proj_b,
                &self.word_embed,
                &self.q_proj_w,
                &self.q_proj_b,
                &self.fuse1_w,
                &self.fuse1_b,
                &self.fuse2_w,
                &self.fuse2_b,
            ])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        Self::PARAM_NAMES
            .into_iter()
            .zip([
                &mut self.conv1_w,
                &mut self.conv1_b,
                &mut self.conv2_w,
                &mut self.conv2_b,
                &mut self.img_proj_w,
                &mut self.img_proj_b,
                &mut self.word_embed,
                &mut self.q_proj_w,
                &mut self.q_proj_b,
                &mut self.fuse1_w,
                &mut self.fuse1_b,
                &mut self.fuse2_w,
                &mut self.fuse2_b,
            ])
            .collect()
    }

    fn validate_inputs(&self, image: &Tensor, question: &[usize]) -> Result<()> {
        if image.shape() != [IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE] {
            return Err(Error::ShapeMismatch {
                op: "forward image",
                lhs: vec![IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE],
                rhs: image.shape().to_vec(),
            });
        }
        if image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument {
                op: "forward",
                reason: "image values must lie in [0, 1]".into(),
            });
        }
        if question.is_empty() || question.len() > MAX_QUESTION_LEN {
            return Err(Error::InvalidArgument {
                op: "forward",
                reason: format!(
                    "question length {} outside 1..={MAX_QUESTION_LEN}",
                    question.len()
                ),
            });
        }
        if let Some(&bad) = question.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::InvalidArgument {
                op: "forward",
                reason: format!("token index {bad} out of range for vocab of {}", self.vocab_size),
            });
        }
        Ok(())
    }

    /// Run the classifier and record the complete graph, with the input
    /// image and the embedding table as differentiable leaves.
    pub fn forward(&self, image: &Tensor, question: &[usize]) -> Result<ForwardPass> {
        self.validate_inputs(image, question)?;
        let mut tape = Tape::new(ReluMode::Classical);

        let params: Vec<ValueId> = self
            .params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect();
        let [c1w, c1b, c2w, c2b, ipw, ipb, emb, qpw, qpb, f1w, f1b, f2w, f2b] =
            params[..].try_into().expect("13 parameters");

        let image_id = tape.leaf(image.clone());

        // Image pathway.
        let c1 = tape.conv2d(image_id, c1w, Some(c1b), 1)?;
        let r1 = tape.relu(c1)?;
        let p1 = tape.avg_pool2x2(r1)?;
        let c2 = tape.conv2d(p1, c2w, Some(c2b), 1)?;
        let r2 = tape.relu(c2)?;
        let p2 = tape.avg_pool2x2(r2)?;
        let flat = tape.reshape(p2, vec![FLAT_DIM])?;
        let iproj = tape.matmul(ipw, flat)?;
        let image_embedding = tape.add(iproj, ipb)?;

        // Question pathway (no ReLU anywhere on this branch).
        let embed_rows = tape.embedding_lookup(emb, question)?;
        let qsum = tape.sum_over_axis(embed_rows, 0)?;
        let qproj = tape.matmul(qpw, qsum)?;
        let qaff = tape.add(qproj, qpb)?;
        let question_embedding = tape.tanh(qaff)?;

        // Fusion and classifier head.
        let fused = tape.mul(image_embedding, question_embedding)?;
        let h1 = tape.matmul(f1w, fused)?;
        let h1b = tape.add(h1, f1b)?;
        let h1r = tape.relu(h1b)?;
        let logits_aff = tape.matmul(f2w, h1r)?;
        let logits = tape.add(logits_aff, f2b)?;
        let probabilities = tape.softmax(logits)?;

        let dist = AnswerDistribution::from_probabilities(tape.value(probabilities).data().to_vec());
        Ok(ForwardPass {
            dist,
            tape,
            ids: ForwardIds {
                params,
                image: image_id,
                embed_rows,
                question_embedding,
                image_embedding,
                fused,
                logits,
                probabilities,
            },
        })
    }

    /// Tape-free forward pass. Performs the same kernel calls in the same
    /// order as [`VqaModel::forward`], so results are bit-identical.
    pub fn forward_infer(&self, image: &Tensor, question: &[usize]) -> Result<AnswerDistribution> {
        self.validate_inputs(image, question)?;

        let side = IMAGE_SIDE;
        let c1 = kernels::conv2d(
            image.data(),
            IMAGE_CHANNELS,
            side,
            side,
            self.conv1_w.data(),
            CONV1_OUT,
            3,
            3,
            Some(self.conv1_b.data()),
            1,
        );
        let r1: Vec<f32> = c1.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let p1 = kernels::avg_pool2x2(&r1, CONV1_OUT, side, side);
        let c2 = kernels::conv2d(
            &p1,
            CONV1_OUT,
            side / 2,
            side / 2,
            self.conv2_w.data(),
            CONV2_OUT,
            3,
            3,
            Some(self.conv2_b.data()),
            1,
        );
        let r2: Vec<f32> = c2.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let p2 = kernels::avg_pool2x2(&r2, CONV2_OUT, side / 2, side / 2);
        let iproj = kernels::matvec(self.img_proj_w.data(), &p2, HIDDEN_DIM, FLAT_DIM);
        let image_embedding: Vec<f32> = iproj
            .iter()
            .zip(self.img_proj_b.data().iter())
            .map(|(&x, &b)| x + b)
            .collect();

        let mut qsum = vec![0.0f32; EMBED_DIM];
        for &t in question {
            let row = &self.word_embed.data()[t * EMBED_DIM..(t + 1) * EMBED_DIM];
            for (s, &v) in qsum.iter_mut().zip(row.iter()) {
                *s += v;
            }
        }
        let qproj = kernels::matvec(self.q_proj_w.data(), &qsum, HIDDEN_DIM, EMBED_DIM);
        let question_embedding: Vec<f32> = qproj
            .iter()
            .zip(self.q_proj_b.data().iter())
            .map(|(&x, &b)| (x + b).tanh())
            .collect();

        let fused: Vec<f32> = image_embedding
            .iter()
            .zip(question_embedding.iter())
            .map(|(&a, &b)| a * b)
            .collect();
        let h1 = kernels::matvec(self.fuse1_w.data(), &fused, HIDDEN_DIM, HIDDEN_DIM);
        let h1r: Vec<f32> = h1
            .iter()
            .zip(self.fuse1_b.data().iter())
            .map(|(&x, &b)| {
                let v = x + b;
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            })
            .collect();
        let logits_aff = kernels::matvec(self.fuse2_w.data(), &h1r, self.answer_count, HIDDEN_DIM);
        let logits: Vec<f32> = logits_aff
            .iter()
            .zip(self.fuse2_b.data().iter())
            .map(|(&x, &b)| x + b)
            .collect();
        let probabilities = kernels::softmax_rows(&logits, 1, self.answer_count);
        Ok(AnswerDistribution::from_probabilities(probabilities))
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|(_, t)| t.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn test_image(fill: f32) -> Tensor {
        Tensor::filled(vec![IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], fill)
    }

    #[test]
    fn probabilities_sum_to_one() {
        let model = VqaModel::new(12, 7, 3).unwrap();
        let pass = model.forward(&test_image(0.4), &[1, 2, 3]).unwrap();
        let sum: f32 = pass.dist.probabilities.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert_eq!(
            pass.dist.predicted_prob,
            pass.dist.probabilities[pass.dist.predicted]
        );
    }

    #[test]
    fn zero_image_with_zero_image_path_biases_fuses_to_zero() {
        let mut model = VqaModel::new(12, 7, 3).unwrap();
        model.conv1_b = Tensor::zeros(vec![8]);
        model.conv2_b = Tensor::zeros(vec![16]);
        model.img_proj_w = Tensor::zeros(vec![HIDDEN_DIM, FLAT_DIM]);
        model.img_proj_b = Tensor::zeros(vec![HIDDEN_DIM]);
        let pass_a = model.forward(&test_image(0.0), &[1, 2]).unwrap();
        assert!(pass_a
            .tape
            .value(pass_a.ids.fused)
            .data()
            .iter()
            .all(|&v| v == 0.0));
        // With a zero fused vector the distribution ignores the question.
        let pass_b = model.forward(&test_image(0.0), &[5, 6, 7, 8]).unwrap();
        assert_eq!(pass_a.dist, pass_b.dist);
    }

    #[test]
    fn forward_is_deterministic_and_matches_infer_bitwise() {
        let model = VqaModel::new(15, 9, 42).unwrap();
        let image = test_image(0.3);
        let q = [1, 4, 2, 9];
        let a = model.forward(&image, &q).unwrap();
        let b = model.forward(&image, &q).unwrap();
        assert_eq!(a.dist, b.dist);
        let fast = model.forward_infer(&image, &q).unwrap();
        for (x, y) in a.dist.probabilities.iter().zip(fast.probabilities.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(a.dist.predicted, fast.predicted);
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = VqaModel::new(10, 5, 1).unwrap();
        let image = test_image(0.5);
        assert!(model.forward(&image, &[]).is_err());
        assert!(model.forward(&image, &[0; 9]).is_err());
        assert!(model.forward(&image, &[10]).is_err());
        assert!(model.forward(&Tensor::zeros(vec![3, 16, 16]), &[1]).is_err());
        assert!(model
            .forward(&test_image(1.5), &[1])
            .is_err());
    }

    #[test]
    fn every_parameter_and_input_receives_a_gradient_slot() {
        let model = VqaModel::new(10, 5, 7).unwrap();
        let pass = model.forward(&test_image(0.6), &[1, 2, 3]).unwrap();
        let mut tape = pass.tape;
        let seed = tape.pick(pass.ids.probabilities, pass.dist.predicted).unwrap();
        let grads = tape.backward(seed).unwrap();
        assert_eq!(grads.len(), tape.len());
        for id in pass.ids.params.iter().chain([&pass.ids.image]) {
            assert_eq!(grads.wrt(*id).shape(), tape.value(*id).shape());
        }
        // Somewhere a nonzero gradient must reach the image.
        assert!(grads.wrt(pass.ids.image).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn argmax_ties_break_to_lowest_index() {
        let d = AnswerDistribution::from_probabilities(vec![0.25, 0.25, 0.25, 0.25]);
        assert_eq!(d.predicted, 0);
        let d = AnswerDistribution::from_probabilities(vec![0.1, 0.45, 0.45]);
        assert_eq!(d.predicted, 1);
    }

    /// With the ReLU-bearing fusion head swapped for a plain linear probe,
    /// every path from the output to the embedding table avoids ReLU, so
    /// guided and classical gradients on the question side must agree
    /// bit-for-bit. Through the real head they may differ.
    #[test]
    fn question_gradients_exact_under_probe_head() {
        let model = VqaModel::new(10, 5, 11).unwrap();
        let image = test_image(0.7);
        let question = [1, 2, 3, 4];

        let run_probe = |mode: ReluMode| {
            let pass = model.forward(&image, &question).unwrap();
            let mut tape = pass.tape;
            tape.set_relu_mode(mode);
            // Probe head: logits = fuse2.weight @ fused (no bias, no ReLU).
            let f2w = pass.ids.params[11];
            let logits = tape.matmul(f2w, pass.ids.fused).unwrap();
            let probs = tape.softmax(logits).unwrap();
            let seed = tape.pick(probs, 0).unwrap();
            let grads = tape.backward(seed).unwrap();
            grads.wrt(pass.ids.embed_rows).clone()
        };
        let classical = run_probe(ReluMode::Classical);
        let guided = run_probe(ReluMode::Guided);
        assert!(classical.bits_eq(&guided));
        assert!(classical.data().iter().any(|&v| v != 0.0));
    }
}
