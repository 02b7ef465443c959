use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{AdaptiveInit, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{trunc_normal, Attention, Conv3x3, LayerNorm, Linear, Mlp, Real, TensorMuts, TensorRefs};

/// Disjoint parameter groups of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// CNN frame encoder (Θe).
    Encoder,
    /// Token projection `W` and positional embedding `E_pos`.
    Projection,
    /// Transformer blocks (Θv).
    Transformer,
    /// Feature reconstructor (Θr).
    Reconstructor,
    /// Adaptive layer (Θd).
    Adaptive,
    /// Classification layer (Θc).
    Classifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Encoder,
        ParamGroup::Projection,
        ParamGroup::Transformer,
        ParamGroup::Reconstructor,
        ParamGroup::Adaptive,
        ParamGroup::Classifier,
    ];

    pub const BACKBONE: [ParamGroup; 4] = [
        ParamGroup::Encoder,
        ParamGroup::Projection,
        ParamGroup::Transformer,
        ParamGroup::Reconstructor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Projection => "projection",
            ParamGroup::Transformer => "transformer",
            ParamGroup::Reconstructor => "reconstructor",
            ParamGroup::Adaptive => "adaptive",
            ParamGroup::Classifier => "classifier",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Optimisation phase used to select trainable groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainPhase {
    Pretrain,
    Adapt,
}

impl std::str::FromStr for TrainPhase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(TrainPhase::Pretrain),
            "adapt" => Ok(TrainPhase::Adapt),
            other => Err(Error::InvalidArgument(format!("unknown phase {other:?}"))),
        }
    }
}

impl TrainPhase {
    /// Groups updated in this phase. Pretraining never touches the heads;
    /// adaptation touches nothing but the heads.
    pub fn trainable_groups(self) -> &'static [ParamGroup] {
        match self {
            TrainPhase::Pretrain => &ParamGroup::BACKBONE,
            TrainPhase::Adapt => &[ParamGroup::Adaptive, ParamGroup::Classifier],
        }
    }

    pub fn is_trainable(self, group: ParamGroup) -> bool {
        self.trainable_groups().contains(&group)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T> {
    /// `(d_t, d_z)`
    pub weight: Array2<T>,
    /// `(n * g * g, d_z)`
    pub pos: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstructor<T> {
    /// `(n * g * g, d_z)` embedding added to the tiled latent.
    pub pos: Array2<T>,
    /// `d_z -> d_t`, stride 1.
    pub conv: Conv3x3<T>,
}

/// All network parameters, partitioned into [`ParamGroup`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T> {
    pub encoder: Vec<Conv3x3<T>>,
    pub projection: Projection<T>,
    pub transformer: Vec<Block<T>>,
    pub reconstructor: Reconstructor<T>,
    pub adaptive: Linear<T>,
    pub classifier: Linear<T>,
}

const TRANSFORMER_INIT_STD: f64 = 0.02;

impl<T: Real> ParameterStore<T> {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let d_z = config.token_dim;
        let d_t = config.feature_dim;
        let l = config.num_tokens();
        let mut c_in = 3;
        let encoder = config
            .encoder_channels
            .iter()
            .map(|&c_out| {
                let conv = Conv3x3::init_he(c_in, c_out, 2, rng);
                c_in = c_out;
                conv
            })
            .collect();
        let proj_bound = 1.0 / (d_t as f64).sqrt();
        let projection = Projection {
            weight: Array2::from_shape_vec(
                (d_t, d_z),
                (0..d_t * d_z)
                    .map(|_| T::lit(rng.random_range(-proj_bound..=proj_bound)))
                    .collect(),
            )
            .expect("shape"),
            pos: Array2::from_shape_vec((l, d_z), trunc_normal(l * d_z, TRANSFORMER_INIT_STD, rng))
                .expect("shape"),
        };
        let hidden = d_z * config.mlp_ratio;
        let transformer = (0..config.blocks)
            .map(|_| Block {
                ln1: LayerNorm::new(d_z),
                attn: Attention {
                    qkv: Linear::init_normal(d_z, 3 * d_z, TRANSFORMER_INIT_STD, rng),
                    proj: Linear::init_normal(d_z, d_z, TRANSFORMER_INIT_STD, rng),
                    heads: config.heads,
                },
                ln2: LayerNorm::new(d_z),
                mlp: Mlp {
                    fc1: Linear::init_normal(d_z, hidden, TRANSFORMER_INIT_STD, rng),
                    fc2: Linear::init_normal(hidden, d_z, TRANSFORMER_INIT_STD, rng),
                },
            })
            .collect();
        let reconstructor = Reconstructor {
            pos: Array2::from_shape_vec((l, d_z), trunc_normal(l * d_z, TRANSFORMER_INIT_STD, rng))
                .expect("shape"),
            conv: Conv3x3::init_fan_in(d_z, d_t, 1, rng),
        };
        let adaptive = match config.adaptive_init {
            AdaptiveInit::Identity => Linear::identity(d_z),
            AdaptiveInit::Random => Linear::init_fan_in(d_z, d_z, rng),
        };
        let classifier = Linear::init_normal(d_z, config.n_classes, TRANSFORMER_INIT_STD, rng);
        Self {
            encoder,
            projection,
            transformer,
            reconstructor,
            adaptive,
            classifier,
        }
    }

    /// Same structure with every entry zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.fill_zero();
        out
    }

    pub fn fill_zero(&mut self) {
        for (_, _, mut t) in self.named_tensors_mut() {
            t.fill(T::zero());
        }
    }

    pub fn group_tensors(&self, group: ParamGroup) -> TensorRefs<'_, T> {
        let mut out = Vec::new();
        match group {
            ParamGroup::Encoder => {
                for (i, conv) in self.encoder.iter().enumerate() {
                    conv.tensors(&format!("encoder.conv{i}"), &mut out);
                }
            }
            ParamGroup::Projection => {
                out.push(("projection.weight".into(), self.projection.weight.view().into_dyn()));
                out.push(("projection.pos".into(), self.projection.pos.view().into_dyn()));
            }
            ParamGroup::Transformer => {
                for (k, b) in self.transformer.iter().enumerate() {
                    let p = format!("transformer.block{k}");
                    b.ln1.tensors(&format!("{p}.ln1"), &mut out);
                    b.attn.tensors(&format!("{p}.attn"), &mut out);
                    b.ln2.tensors(&format!("{p}.ln2"), &mut out);
                    b.mlp.tensors(&format!("{p}.mlp"), &mut out);
                }
            }
            ParamGroup::Reconstructor => {
                out.push(("reconstructor.pos".into(), self.reconstructor.pos.view().into_dyn()));
                self.reconstructor.conv.tensors("reconstructor.conv", &mut out);
            }
            ParamGroup::Adaptive => self.adaptive.tensors("adaptive", &mut out),
            ParamGroup::Classifier => self.classifier.tensors("classifier", &mut out),
        }
        out
    }

    pub fn group_tensors_mut(&mut self, group: ParamGroup) -> TensorMuts<'_, T> {
        let mut out = Vec::new();
        match group {
            ParamGroup::Encoder => {
                for (i, conv) in self.encoder.iter_mut().enumerate() {
                    conv.tensors_mut(&format!("encoder.conv{i}"), &mut out);
                }
            }
            ParamGroup::Projection => {
                out.push(("projection.weight".into(), self.projection.weight.view_mut().into_dyn()));
                out.push(("projection.pos".into(), self.projection.pos.view_mut().into_dyn()));
            }
            ParamGroup::Transformer => {
                for (k, b) in self.transformer.iter_mut().enumerate() {
                    let p = format!("transformer.block{k}");
                    b.ln1.tensors_mut(&format!("{p}.ln1"), &mut out);
                    b.attn.tensors_mut(&format!("{p}.attn"), &mut out);
                    b.ln2.tensors_mut(&format!("{p}.ln2"), &mut out);
                    b.mlp.tensors_mut(&format!("{p}.mlp"), &mut out);
                }
            }
            ParamGroup::Reconstructor => {
                out.push(("reconstructor.pos".into(), self.reconstructor.pos.view_mut().into_dyn()));
                self.reconstructor.conv.tensors_mut("reconstructor.conv", &mut out);
            }
            ParamGroup::Adaptive => self.adaptive.tensors_mut("adaptive", &mut out),
            ParamGroup::Classifier => self.classifier.tensors_mut("classifier", &mut out),
        }
        out
    }

    pub fn named_tensors(&self) -> Vec<(ParamGroup, String, ArrayViewD<'_, T>)> {
        ParamGroup::ALL
            .into_iter()
            .flat_map(|g| self.group_tensors(g).into_iter().map(move |(n, t)| (g, n, t)))
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(ParamGroup, String, ArrayViewMutD<'_, T>)> {
        let Self {
            encoder,
            projection,
            transformer,
            reconstructor,
            adaptive,
            classifier,
        } = self;
        let mut out = Vec::new();
        let mut enc = Vec::new();
        for (i, conv) in encoder.iter_mut().enumerate() {
            conv.tensors_mut(&format!("encoder.conv{i}"), &mut enc);
        }
        out.extend(enc.into_iter().map(|(n, t)| (ParamGroup::Encoder, n, t)));
        out.push((ParamGroup::Projection, "projection.weight".into(), projection.weight.view_mut().into_dyn()));
        out.push((ParamGroup::Projection, "projection.pos".into(), projection.pos.view_mut().into_dyn()));
        let mut tr = Vec::new();
        for (k, b) in transformer.iter_mut().enumerate() {
            let p = format!("transformer.block{k}");
            b.ln1.tensors_mut(&format!("{p}.ln1"), &mut tr);
            b.attn.tensors_mut(&format!("{p}.attn"), &mut tr);
            b.ln2.tensors_mut(&format!("{p}.ln2"), &mut tr);
            b.mlp.tensors_mut(&format!("{p}.mlp"), &mut tr);
        }
        out.extend(tr.into_iter().map(|(n, t)| (ParamGroup::Transformer, n, t)));
        out.push((ParamGroup::Reconstructor, "reconstructor.pos".into(), reconstructor.pos.view_mut().into_dyn()));
        let mut rc = Vec::new();
        reconstructor.conv.tensors_mut("reconstructor.conv", &mut rc);
        out.extend(rc.into_iter().map(|(n, t)| (ParamGroup::Reconstructor, n, t)));
        let mut ad = Vec::new();
        adaptive.tensors_mut("adaptive", &mut ad);
        out.extend(ad.into_iter().map(|(n, t)| (ParamGroup::Adaptive, n, t)));
        let mut cl = Vec::new();
        classifier.tensors_mut("classifier", &mut cl);
        out.extend(cl.into_iter().map(|(n, t)| (ParamGroup::Classifier, n, t)));
        out
    }

    pub fn group_len(&self, group: ParamGroup) -> usize {
        self.group_tensors(group).iter().map(|(_, t)| t.len()).sum()
    }

    pub fn len(&self) -> usize {
        ParamGroup::ALL.into_iter().map(|g| self.group_len(g)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Names and element counts of the parameters optimised in `phase`.
    pub fn trainable_parameters(&self, phase: TrainPhase) -> BTreeMap<String, usize> {
        phase
            .trainable_groups()
            .iter()
            .flat_map(|&g| self.group_tensors(g))
            .map(|(n, t)| (n, t.len()))
            .collect()
    }

    pub fn trainable_count(&self, phase: TrainPhase) -> usize {
        self.trainable_parameters(phase).values().sum()
    }

    /// SHA-256 over the little-endian bytes of one group, in name order.
    pub fn group_hash(&self, group: ParamGroup) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.group_tensors(group) {
            hasher.update(name.as_bytes());
            buf.clear();
            for &v in t.iter() {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }

    /// Hash of the frozen backbone (everything except the two heads).
    pub fn backbone_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for g in ParamGroup::BACKBONE {
            hasher.update(self.group_hash(g).as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn heads_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.group_hash(ParamGroup::Adaptive).as_bytes());
        hasher.update(self.group_hash(ParamGroup::Classifier).as_bytes());
        hex::encode(hasher.finalize())
    }

    /// Converts every tensor to another float type.
    pub fn cast<U: Real>(&self, config: &ModelConfig) -> ParameterStore<U> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut out = ParameterStore::<U>::init(config, &mut rng);
        for ((_, _, src), (_, _, mut dst)) in self.named_tensors().into_iter().zip(out.named_tensors_mut()) {
            dst.zip_mut_with(&src, |d, &s| *d = U::from(s).expect("cast"));
        }
        out
    }

    /// Checks every tensor shape against what `config` implies, naming the
    /// first offending group.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let expected = ParameterStore::<T>::init(config, &mut rng);
        for group in ParamGroup::ALL {
            let have = self.group_tensors(group);
            let want = expected.group_tensors(group);
            if have.len() != want.len() {
                return Err(Error::CheckpointMismatch {
                    group: group.to_string(),
                    detail: format!("{} tensors, config implies {}", have.len(), want.len()),
                });
            }
            for ((hn, ht), (wn, wt)) in have.iter().zip(want.iter()) {
                if hn != wn || ht.shape() != wt.shape() {
                    return Err(Error::CheckpointMismatch {
                        group: group.to_string(),
                        detail: format!("{hn} has shape {:?}, config implies {wn} {:?}", ht.shape(), wt.shape()),
                    });
                }
            }
        }
        Ok(())
    }
}
