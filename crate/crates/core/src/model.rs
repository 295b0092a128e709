//! The full network: encoders, modality-level embeddings, fusion,
//! domain-level embeddings and the classifier, with the alternative fusion
//! wirings used by the ablation variants.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::disentangle::{EmbedPair, PairVars, EMBED_DIM};
use crate::encoders::{batch_input, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::fusion::{FusionConfig, PairOutput, TripleFusion};
use crate::nn::{Binding, ForwardCtx, Linear, ParamStore};
use crate::preprocess::PreparedSample;
use crate::rng::{self, Rng};
use crate::{Modality, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Attention,
    Concat,
    ConcatEmb,
    Add,
    AddEmb,
    /// One modality; the encoder output feeds the domain level directly.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub fusion_kind: FusionKind,
    pub modalities: Vec<Modality>,
    pub embed_dim: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let single = self.fusion_kind == FusionKind::Single;
        let ok = if single {
            self.modalities.len() == 1
        } else {
            self.modalities == Modality::ALL
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "fusion {:?} is incompatible with modalities {:?}",
                self.fusion_kind, self.modalities
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidArgument("embed_dim must be positive".into()));
        }
        if !single && 2 * self.embed_dim != self.encoder.feature_dim {
            return Err(Error::InvalidArgument(format!(
                "invariant+specific width {} must equal the encoder feature width {}",
                2 * self.embed_dim,
                self.encoder.feature_dim
            )));
        }
        Ok(())
    }

    /// Width entering the domain-level embedding.
    pub fn fused_dim(&self) -> usize {
        let d = self.encoder.feature_dim;
        match self.fusion_kind {
            FusionKind::Attention => 3 * self.fusion.pair_width(),
            FusionKind::Concat | FusionKind::ConcatEmb | FusionKind::AddEmb => 3 * d,
            FusionKind::Add | FusionKind::Single => d,
        }
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            fusion_kind: FusionKind::Attention,
            modalities: Modality::ALL.to_vec(),
            embed_dim: EMBED_DIM,
        }
    }
}

#[derive(Debug, Clone)]
enum Fuser {
    Attention(TripleFusion),
    Concat(Option<Linear>),
    Add(Option<Linear>),
    Single,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// Encoder outputs, in `spec.modalities` order.
    pub features: Vec<Var>,
    /// Modality-level embeddings; empty for single-modal models.
    pub modality_pairs: Vec<PairVars>,
    pub attention: Option<[PairOutput; 3]>,
    pub fused: Var,
    pub domain_pair: PairVars,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    encoders: Vec<Encoder>,
    modality_embed: Vec<EmbedPair>,
    fuser: Fuser,
    domain_embed: EmbedPair,
    classifier: Linear,
}

impl Model {
    /// Parameters are drawn from the `init` substream of `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::substream(seed, &["init"]);
        Self::with_rng(spec, &mut rng)
    }

    pub fn with_rng(spec: ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut encoders = Vec::new();
        for &m in &spec.modalities {
            encoders.push(Encoder::new(&mut store, rng, &format!("enc.{}", m.tag()), spec.encoder.spec(m))?);
        }
        let d = spec.encoder.feature_dim;
        let modality_embed = if spec.fusion_kind == FusionKind::Single {
            Vec::new()
        } else {
            spec.modalities
                .iter()
                .map(|m| EmbedPair::new(&mut store, rng, &format!("modemb.{}", m.tag()), d, spec.embed_dim))
                .collect()
        };
        let fuser = match spec.fusion_kind {
            FusionKind::Attention => Fuser::Attention(TripleFusion::new(&mut store, rng, "fusion", d, spec.fusion)?),
            FusionKind::Concat => Fuser::Concat(None),
            FusionKind::ConcatEmb => Fuser::Concat(Some(Linear::new(&mut store, rng, "fusion.emb", 3 * d, 3 * d))),
            FusionKind::Add => Fuser::Add(None),
            FusionKind::AddEmb => Fuser::Add(Some(Linear::new(&mut store, rng, "fusion.emb", d, 3 * d))),
            FusionKind::Single => Fuser::Single,
        };
        let domain_embed = EmbedPair::new(&mut store, rng, "domemb", spec.fused_dim(), spec.embed_dim);
        let classifier = Linear::new(&mut store, rng, "classifier", 2 * spec.embed_dim, NUM_CLASSES);
        Ok(Model { spec, store, encoders, modality_embed, fuser, domain_embed, classifier })
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    /// Logits of the classifier on `[h_inv, h_spe]`.
    pub fn classify_logits(&self, g: &mut Graph, bind: &Binding, pair: PairVars) -> Var {
        classify_logits(g, bind, &self.classifier, pair)
    }

    /// `inputs` holds one `[N, C, H, W]` batch per entry of `spec.modalities`.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, ctx: &mut ForwardCtx, inputs: &[Var]) -> Result<ForwardOut> {
        if inputs.len() != self.encoders.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} modality inputs, got {}",
                self.encoders.len(),
                inputs.len()
            )));
        }
        let mut features = Vec::with_capacity(inputs.len());
        for (enc, &x) in self.encoders.iter().zip(inputs) {
            features.push(enc.forward(g, bind, &self.store, ctx, x)?);
        }
        let mut modality_pairs = Vec::with_capacity(self.modality_embed.len());
        let mut joined = Vec::with_capacity(self.modality_embed.len());
        for (emb, &f) in self.modality_embed.iter().zip(&features) {
            let p = emb.forward(g, bind, f)?;
            joined.push(g.concat(&[p.inv, p.spe], 1));
            modality_pairs.push(p);
        }
        let mut attention = None;
        let fused = match &self.fuser {
            Fuser::Attention(tf) => {
                let (fused, outs) = tf.forward(g, bind, [joined[0], joined[1], joined[2]])?;
                attention = Some(outs);
                fused
            }
            Fuser::Concat(emb) => {
                let c = g.concat(&joined, 1);
                match emb {
                    Some(l) => l.forward(g, bind, c),
                    None => c,
                }
            }
            Fuser::Add(emb) => {
                let s = g.add(joined[0], joined[1]);
                let s = g.add(s, joined[2]);
                match emb {
                    Some(l) => l.forward(g, bind, s),
                    None => s,
                }
            }
            Fuser::Single => features[0],
        };
        let domain_pair = self.domain_embed.forward(g, bind, fused)?;
        let logits = self.classify_logits(g, bind, domain_pair);
        Ok(ForwardOut { features, modality_pairs, attention, fused, domain_pair, logits })
    }

    /// Evaluation-mode class probabilities `[N, 8]`, computed in chunks.
    pub fn predict(&self, samples: &[&PreparedSample], exec: Execution, chunk: usize) -> Result<Array2<f64>> {
        let chunks: Vec<&[&PreparedSample]> = samples.chunks(chunk.max(1)).collect();
        let parts = exec::map_collect(exec, &chunks, |c| self.predict_chunk(c));
        let mut out = Array2::<f64>::zeros((samples.len(), NUM_CLASSES));
        let mut row = 0;
        for p in parts {
            let p = p?;
            out.slice_mut(ndarray::s![row..row + p.nrows(), ..]).assign(&p);
            row += p.nrows();
        }
        Ok(out)
    }

    fn predict_chunk(&self, samples: &[&PreparedSample]) -> Result<Array2<f64>> {
        let mut g = Graph::with_execution(Execution::Sequential);
        let bind = self.store.bind(&mut g);
        let inputs = self
            .spec
            .modalities
            .iter()
            .map(|&m| Ok(g.constant(batch_input(m, samples)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut ctx = ForwardCtx::eval();
        let out = self.forward(&mut g, &bind, &mut ctx, &inputs)?;
        let probs = g.softmax(out.logits);
        Ok(g.value(probs).clone().into_dimensionality().expect("rank 2"))
    }
}

/// Single linear layer on the concatenated invariant/specific pair.
pub fn classify_logits(g: &mut Graph, bind: &Binding, classifier: &Linear, pair: PairVars) -> Var {
    let h = g.concat(&[pair.inv, pair.spe], 1);
    classifier.forward(g, bind, h)
}
