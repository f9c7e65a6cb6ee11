//! Desk-scale detector: a frozen backbone that embeds synthetic scene
//! objects into proposal slots, the prompted decoder, and trainable
//! class/box heads. Only the heads and the prompt generators ever
//! train; everything else is fixed at construction.

pub mod eval;
pub mod scene;

use crate::params::{ParamEntry, ParamError, ParameterVector};
use crate::prompt::{DecoderConfig, DecoderStack, GeneratorVars, PromptError, PromptVars};
use crate::rng::{normal, stream, uniform_tensor};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use scene::SyntheticScene;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("class id {class_id} is outside the {num_classes}-class universe")]
    UnknownClass { class_id: usize, num_classes: usize },
    #[error("encoder model dim {encoder} does not match decoder model dim {decoder}")]
    DimMismatch { encoder: usize, decoder: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Params(#[from] ParamError),
}

/// One scored prediction: the best foreground class for a slot, its
/// probability, and the regressed box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: [f64; 4],
}

/// Shape of the frozen backbone and its synthetic feature model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Dimension of the class-conditional feature space.
    pub feature_dim: usize,
    /// Proposal embedding width; must equal the decoder's model dim.
    pub model_dim: usize,
    /// Fixed number of proposal slots per scene.
    pub slots: usize,
    /// Foreground class universe size across all tasks.
    pub num_classes: usize,
    /// Std of class prototype coordinates; larger separates classes.
    pub prototype_scale: f64,
    /// Std of per-object noise around the class prototype.
    pub feature_noise: f64,
    /// Std of the pure-noise features filling unused slots.
    pub background_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            feature_dim: 16,
            model_dim: 32,
            slots: 10,
            num_classes: 12,
            prototype_scale: 1.0,
            feature_noise: 0.1,
            background_scale: 0.05,
        }
    }
}

/// Frozen proposal backbone: each object is a class prototype plus
/// noise, concatenated with its box and pushed through a fixed random
/// affine map into model space. Unused slots hold low-magnitude noise.
#[derive(Debug, Clone)]
pub struct SceneEncoder {
    pub cfg: EncoderConfig,
    prototypes: Vec<Vec<f64>>,
    projection: Tensor,
    bias: Vec<f64>,
}

impl SceneEncoder {
    pub fn init(cfg: EncoderConfig, seed: u64) -> Self {
        let prototypes = (0..cfg.num_classes)
            .map(|c| {
                let mut rng = stream(seed, "encoder/prototype", c as u64);
                (0..cfg.feature_dim)
                    .map(|_| normal(&mut rng, 0.0, cfg.prototype_scale))
                    .collect()
            })
            .collect();
        let input_dim = cfg.feature_dim + 4;
        let mut rng = stream(seed, "encoder/projection", 0);
        let scale = (1.0 / input_dim as f64).sqrt();
        let projection = uniform_tensor(&mut rng, &[input_dim, cfg.model_dim], scale);
        let bias = (0..cfg.model_dim)
            .map(|_| normal(&mut rng, 0.0, 0.01))
            .collect();
        SceneEncoder {
            cfg,
            prototypes,
            projection,
            bias,
        }
    }

    /// Noisy class-conditional feature for one object of a scene.
    fn object_feature(&self, scene_seed: u64, slot: usize, class_id: usize) -> Vec<f64> {
        let mut rng = stream(scene_seed, "encoder/feature", slot as u64);
        self.prototypes[class_id]
            .iter()
            .map(|&p| p + normal(&mut rng, 0.0, self.cfg.feature_noise))
            .collect()
    }

    /// Proposal matrix [slots, model_dim] for a scene. Slot i < number
    /// of objects embeds object i; the remainder hold background noise.
    /// Deterministic in the scene's own seed.
    pub fn proposals(&self, scene: &SyntheticScene) -> Result<Tensor, DetectorError> {
        let input_dim = self.cfg.feature_dim + 4;
        let mut data = vec![0.0; self.cfg.slots * self.cfg.model_dim];
        for slot in 0..self.cfg.slots {
            let input: Vec<f64> = match scene.objects.get(slot) {
                Some(obj) => {
                    if obj.class_id >= self.cfg.num_classes {
                        return Err(DetectorError::UnknownClass {
                            class_id: obj.class_id,
                            num_classes: self.cfg.num_classes,
                        });
                    }
                    let mut v = self.object_feature(scene.seed, slot, obj.class_id);
                    v.extend_from_slice(&obj.bbox);
                    v
                }
                None => {
                    let mut rng = stream(scene.seed, "encoder/background", slot as u64);
                    (0..input_dim)
                        .map(|_| normal(&mut rng, 0.0, self.cfg.background_scale))
                        .collect()
                }
            };
            for d in 0..self.cfg.model_dim {
                let mut acc = self.bias[d];
                for (k, &x) in input.iter().enumerate() {
                    acc += x * self.projection.at2(k, d);
                }
                data[slot * self.cfg.model_dim + d] = acc;
            }
        }
        Ok(Tensor::new(vec![self.cfg.slots, self.cfg.model_dim], data).expect("proposal shape"))
    }

    /// Frozen state flattened for hashing.
    pub fn bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        for proto in &self.prototypes {
            for v in proto {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in self.projection.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.bias {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }
}

/// Tape handles for the trainable heads.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub class_w: Var,
    pub class_b: Var,
    pub box_w: Var,
    pub box_b: Var,
}

/// Everything the forward pass exposes for loss building and analysis.
pub struct SceneForward {
    /// Raw class logits, [slots, num_classes + 1] with background last.
    pub class_logits: Var,
    /// Softmax of the logits along the class axis.
    pub class_probs: Var,
    /// Regressed boxes in unit coordinates, [slots, 4].
    pub boxes: Var,
    /// Final decoder slot features, [slots, model_dim].
    pub slot_features: Var,
    /// Prompts injected this pass (empty on the prompt-free path).
    pub prompts: Vec<PromptVars>,
}

/// Detector with a frozen backbone and decoder; the trainable state is
/// exactly the prompt generators plus the class and box heads. The
/// class head has one extra final column for background.
#[derive(Debug, Clone)]
pub struct ToyDetector {
    pub encoder: SceneEncoder,
    pub decoder: DecoderStack,
    pub class_head: Tensor,
    pub class_bias: Tensor,
    pub box_head: Tensor,
    pub box_bias: Tensor,
}

impl ToyDetector {
    pub fn init(
        encoder_cfg: EncoderConfig,
        decoder_cfg: DecoderConfig,
        seed: u64,
    ) -> Result<Self, DetectorError> {
        if encoder_cfg.model_dim != decoder_cfg.model_dim {
            return Err(DetectorError::DimMismatch {
                encoder: encoder_cfg.model_dim,
                decoder: decoder_cfg.model_dim,
            });
        }
        let num_classes = encoder_cfg.num_classes;
        let dim = encoder_cfg.model_dim;
        let encoder = SceneEncoder::init(encoder_cfg, seed);
        let decoder = DecoderStack::init(decoder_cfg, &mut stream(seed, "decoder", 0))?;
        // Heads start at zero so every slot predicts the same box and
        // the same uniform class distribution. The first training steps
        // then match targets by slot order, which coincides with the
        // encoder's object-order layout; the greedy IoU matcher
        // bootstraps from consistent pairs instead of locking onto
        // whichever randomly-initialized box happened to overlap first.
        Ok(ToyDetector {
            encoder,
            decoder,
            class_head: Tensor::zeros(&[dim, num_classes + 1]),
            class_bias: Tensor::zeros(&[1, num_classes + 1]),
            box_head: Tensor::zeros(&[dim, 4]),
            box_bias: Tensor::zeros(&[1, 4]),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.encoder.cfg.num_classes
    }

    pub fn slots(&self) -> usize {
        self.encoder.cfg.slots
    }

    /// Register head weights on a tape.
    pub fn register_heads(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        let reg = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.leaf(&t.clone().with_grad())
            } else {
                tape.constant(t)
            }
        };
        HeadVars {
            class_w: reg(tape, &self.class_head),
            class_b: reg(tape, &self.class_bias),
            box_w: reg(tape, &self.box_head),
            box_b: reg(tape, &self.box_bias),
        }
    }

    /// Full differentiable pass over one scene's proposals. Passing
    /// `None` generators runs the decoder without prompts.
    pub fn forward_scene(
        &self,
        tape: &mut Tape,
        proposals: &Tensor,
        generators: Option<&[GeneratorVars]>,
        heads: &HeadVars,
    ) -> Result<SceneForward, DetectorError> {
        let prop_var = tape.constant(proposals);
        let (slot_features, prompts) = self.decoder.forward(tape, prop_var, generators)?;

        let ones = tape.constant(&Tensor::new(vec![self.slots(), 1], vec![1.0; self.slots()])?);
        let class_bias = tape.matmul(ones, heads.class_b)?;
        let class_logits = tape.matmul(slot_features, heads.class_w)?;
        let class_logits = tape.add(class_logits, class_bias)?;
        let class_probs = tape.softmax(class_logits, 1)?;

        let box_bias = tape.matmul(ones, heads.box_b)?;
        let box_raw = tape.matmul(slot_features, heads.box_w)?;
        let box_raw = tape.add(box_raw, box_bias)?;
        let boxes = tape.sigmoid(box_raw);

        Ok(SceneForward {
            class_logits,
            class_probs,
            boxes,
            slot_features,
            prompts,
        })
    }

    /// Run inference on one scene, prompts enabled.
    pub fn infer(&self, scene: &SyntheticScene) -> Result<Vec<Detection>, DetectorError> {
        self.infer_configured(scene, true)
    }

    /// Inference with an explicit prompt toggle (the prompt-free path
    /// is the ablation baseline).
    pub fn infer_configured(
        &self,
        scene: &SyntheticScene,
        use_prompts: bool,
    ) -> Result<Vec<Detection>, DetectorError> {
        let proposals = self.encoder.proposals(scene)?;
        let mut tape = Tape::new();
        let heads = self.register_heads(&mut tape, false);
        let gens = if use_prompts {
            Some(self.decoder.register_generators(&mut tape, false))
        } else {
            None
        };
        let fwd = self.forward_scene(&mut tape, &proposals, gens.as_deref(), &heads)?;
        Ok(detections_from_outputs(
            &tape.value(fwd.class_probs),
            &tape.value(fwd.boxes),
            self.num_classes(),
        ))
    }

    /// Trainable state as one named vector: prompt generators first
    /// (`layer{j}.W1/W2`), then the heads.
    pub fn trainable_params(&self) -> ParameterVector {
        let mut entries: Vec<ParamEntry> = self.decoder.prompt_params().entries().to_vec();
        for (name, t) in [
            ("head.class_w", &self.class_head),
            ("head.class_b", &self.class_bias),
            ("head.box_w", &self.box_head),
            ("head.box_b", &self.box_bias),
        ] {
            entries.push(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            });
        }
        ParameterVector::new(entries).expect("trainable names are unique")
    }

    /// Load trainable state back; must align with `trainable_params()`.
    pub fn set_trainable_params(&mut self, pv: &ParameterVector) -> Result<(), DetectorError> {
        self.trainable_params().check_aligned(pv)?;
        let prompt_entries: Vec<ParamEntry> = pv
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("layer"))
            .cloned()
            .collect();
        self.decoder
            .set_prompt_params(&ParameterVector::new(prompt_entries)?)?;
        let fetch = |name: &str| {
            let e = pv.entry(name).expect("aligned");
            Tensor::new(e.shape.clone(), e.values.clone()).expect("aligned shape")
        };
        self.class_head = fetch("head.class_w");
        self.class_bias = fetch("head.class_b");
        self.box_head = fetch("head.box_w");
        self.box_bias = fetch("head.box_b");
        Ok(())
    }

    /// Prompt-generator slice of the trainable state, the part that
    /// parameter fusion operates on.
    pub fn prompt_params(&self) -> ParameterVector {
        self.decoder.prompt_params()
    }

    /// Hex digest of every frozen weight; constant across a run.
    pub fn frozen_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.encoder.bytes());
        hasher.update(self.decoder.frozen_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// One Detection per slot: argmax over foreground probabilities (the
/// background column is skipped) with the regressed box.
pub fn detections_from_outputs(
    class_probs: &Tensor,
    boxes: &Tensor,
    num_classes: usize,
) -> Vec<Detection> {
    let slots = class_probs.shape()[0];
    (0..slots)
        .map(|s| {
            let mut best_class = 0;
            let mut best_score = f64::NEG_INFINITY;
            for c in 0..num_classes {
                let p = class_probs.at2(s, c);
                if p > best_score {
                    best_score = p;
                    best_class = c;
                }
            }
            Detection {
                class_id: best_class,
                score: best_score,
                bbox: [
                    boxes.at2(s, 0),
                    boxes.at2(s, 1),
                    boxes.at2(s, 2),
                    boxes.at2(s, 3),
                ],
            }
        })
        .collect()
}
