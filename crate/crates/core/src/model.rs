//! The full detector: text pathway, backbone, encoder and decoder wired
//! together, for both inference and training passes.

use std::path::Path;
use std::time::{Duration, Instant};

use efh_numcore::{seeded_rng, Scalar, Tensor, Var};

use crate::backbone::{Backbone, Image, PyramidVars};
use crate::config::ModelConfig;
use crate::decoder::{build_dn_mask, Decoder, DetectionSet, LayerOutput, QueryState};
use crate::encoder::{relevance_scores, select_queries, EncodedFeatures, Encoder};
use crate::error::{Error, Result};
use crate::nn::{Builder, Linear};
use crate::params::{ParamStore, Session};
use crate::textenc::{LanguageCache, TextEncoder};

/// Denoising queries built from noised ground truth, `groups` blocks of
/// `per_group` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DnQueries<T> {
    pub boxes: Tensor<T>,
    pub labels: Vec<usize>,
    pub groups: usize,
    pub per_group: usize,
}

impl<T> DnQueries<T> {
    pub fn len(&self) -> usize {
        self.groups * self.per_group
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encoder-side results of one pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput<T> {
    pub features: EncodedFeatures<T>,
    /// Candidate boxes for every position, `[M, 4]`.
    pub candidates: Var,
    pub relevance: Vec<T>,
    pub selected: Vec<usize>,
    /// `B_0`, `[K, 4]`.
    pub proposals: Var,
    /// Projected label embeddings `[K_lbl, d]`.
    pub labels: Var,
}

/// Everything a loss needs from one training pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub encoder: EncoderOutput<T>,
    pub layers: Vec<LayerOutput>,
    /// Leading denoising rows in every layer output.
    pub n_dn: usize,
    /// Matching queries following the denoising rows.
    pub k: usize,
}

/// Wall time of the four inference stages.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub text_backbone: Duration,
    pub image_backbone: Duration,
    pub encoder_fpn: Duration,
    pub decoder_head: Duration,
}

#[derive(Debug, Clone)]
pub struct Detector<T: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub text: TextEncoder,
    pub backbone: Backbone,
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// Content of denoising queries from their (noised) label embeddings.
    pub dn_label_proj: Linear,
}

impl<T: Scalar> Detector<T> {
    /// Builds a freshly initialized detector; identical configs (including
    /// the seed) give identical weights in either precision.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(cfg.seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let text = TextEncoder::new(&mut b.sub("text"), &cfg);
        let backbone = Backbone::new(&mut b.sub("backbone"), &cfg);
        let encoder = Encoder::new(&mut b.sub("encoder"), &cfg);
        let decoder = Decoder::new(&mut b.sub("decoder"), &cfg);
        let dn_label_proj = Linear::new(&mut b, "dn_label_proj", cfg.d_text, cfg.d_model);
        text.freeze(&mut store, "text", cfg.frozen_text_layers);
        Ok(Self {
            cfg,
            store,
            text,
            backbone,
            encoder,
            decoder,
            dn_label_proj,
        })
    }

    /// The same detector with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Detector<U> {
        Detector {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            text: self.text.clone(),
            backbone: self.backbone.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            dn_label_proj: self.dn_label_proj,
        }
    }

    pub fn load_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.store.load(path)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.store.save(path)
    }

    /// Differentiable text embeddings: labels `[K_lbl, d_text]` and prompt
    /// tokens `[T, d_text]`.
    pub fn text_vars(&self, s: &mut Session<T>, labels: &[String], prompt: &str) -> Result<(Var, Var)> {
        let l = self.text.labels_var(s, labels)?;
        let p = self.text.prompt_var(s, prompt)?;
        Ok((l, p))
    }

    /// Encoder, candidate boxes, relevance and selection of
    /// `min(num_queries, M)` proposals.
    pub fn run_encoder(&self, s: &mut Session<T>, pyr: &PyramidVars, labels: Var) -> Result<EncoderOutput<T>> {
        let features = self.encoder.encode(s, pyr)?;
        let candidates = self.encoder.candidate_boxes(s, &features)?;
        let labels = self.encoder.project_labels(s, labels)?;
        let relevance = relevance_scores(s.value(features.o), s.value(labels))?;
        let k = self.cfg.num_queries.min(features.len());
        let (selected, props) = select_queries(s, candidates, &relevance, k)?;
        Ok(EncoderOutput {
            features,
            candidates,
            relevance,
            selected,
            proposals: props.boxes,
            labels,
        })
    }

    /// Decoder layers from `Q_0`, `P_0 = proj(e(p))` and `B_0`, with
    /// denoising rows prepended when `dn` is given.
    pub fn run_decoder(
        &self,
        s: &mut Session<T>,
        enc: &EncoderOutput<T>,
        label_text: Var,
        prompt: Var,
        dn: Option<&DnQueries<T>>,
    ) -> Result<(Vec<LayerOutput>, usize, usize)> {
        let k = enc.selected.len();
        let q0 = self.decoder.initial_queries(s, k)?;
        let p0 = self.decoder.prompt_proj.forward(s, prompt)?;
        let t = s.g.shape(p0)[0];
        let (q, b, n_dn, mask) = match dn.filter(|d| !d.is_empty()) {
            Some(dn) => {
                if dn.boxes.shape() != [dn.len(), 4] || dn.labels.len() != dn.len() {
                    return Err(Error::arg("denoising boxes and labels disagree with their layout"));
                }
                let e = s.g.gather_rows(label_text, &dn.labels)?;
                let content = self.dn_label_proj.forward(s, e)?;
                let boxes = s.constant(dn.boxes.clone());
                let q = s.g.concat_rows(&[content, q0])?;
                let b = s.g.concat_rows(&[boxes, enc.proposals])?;
                (q, b, dn.len(), build_dn_mask(k, dn.groups, dn.per_group, t)?)
            }
            None => (q0, enc.proposals, 0, build_dn_mask(k, 0, 0, t)?),
        };
        let init = QueryState { q, p: p0, b };
        let layers = self.decoder.run(
            s,
            init,
            enc.features.o,
            &enc.features.levels,
            enc.labels,
            &mask,
        )?;
        Ok((layers, n_dn, k))
    }

    /// Full pass with text already in the graph.
    pub fn forward(
        &self,
        s: &mut Session<T>,
        image: &Image<T>,
        labels: Var,
        prompt: Var,
        dn: Option<&DnQueries<T>>,
    ) -> Result<ForwardOutput<T>> {
        let pyr = self.backbone.forward(s, image)?;
        let encoder = self.run_encoder(s, &pyr, labels)?;
        let (layers, n_dn, k) = self.run_decoder(s, &encoder, labels, prompt, dn)?;
        Ok(ForwardOutput {
            encoder,
            layers,
            n_dn,
            k,
        })
    }

    pub fn detect(
        &self,
        image: &Image<T>,
        image_id: &str,
        labels: &[String],
        prompt: &str,
        cache: Option<&LanguageCache<T>>,
    ) -> Result<DetectionSet> {
        Ok(self.detect_profiled(image, image_id, labels, prompt, cache)?.0)
    }

    /// Inference with the four stages timed separately. Text embeddings come
    /// from `cache` when given.
    pub fn detect_profiled(
        &self,
        image: &Image<T>,
        image_id: &str,
        labels: &[String],
        prompt: &str,
        cache: Option<&LanguageCache<T>>,
    ) -> Result<(DetectionSet, StageTimes)> {
        let mut times = StageTimes::default();
        let t0 = Instant::now();
        let lab = self.text.encode_labels(&self.store, labels, cache)?;
        let pr = self.text.encode_prompt(&self.store, prompt, cache)?;
        times.text_backbone = t0.elapsed();

        let t1 = Instant::now();
        let mut s = Session::inference(&self.store);
        let pyr = self.backbone.forward(&mut s, image)?;
        times.image_backbone = t1.elapsed();

        let t2 = Instant::now();
        let lv = s.constant(lab.embeddings);
        let pv = s.constant(pr.embeddings);
        let enc = self.run_encoder(&mut s, &pyr, lv)?;
        times.encoder_fpn = t2.elapsed();

        let t3 = Instant::now();
        let (layers, _, _) = self.run_decoder(&mut s, &enc, lv, pv, None)?;
        let last = layers.last().expect("at least one decoder layer");
        let set = DetectionSet::from_outputs(
            s.value(last.boxes),
            s.value(last.logits),
            self.cfg.score_threshold,
            image_id,
            prompt,
            labels,
        );
        times.decoder_head = t3.elapsed();
        Ok((set, times))
    }
}
