//! Wiring of the four architectures on top of the shared building blocks.

use seqintent_tensor::{Graph, ParamSet, Var};

use crate::config::{Arch, Config, HeadSpec};
use crate::data::Interaction;
use crate::encoder::EncoderSpec;
use crate::error::{Error, Result};
use crate::features::{self, InputVars};
use crate::intent::{self, Aggregate, HeadOutput};
use crate::item;
use crate::nn::Init;

/// Graph nodes of one forward pass over a sequence.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    pub inputs: InputVars,
    /// Encoder feeding the intent heads (the shared one for V1).
    pub intent_enc: Option<Var>,
    pub heads: Vec<HeadOutput>,
    pub aggregate: Option<Aggregate>,
    pub item_input: Var,
    pub item_enc: Var,
    pub item_logits: Var,
}

/// Parameter-free description of a model; evaluates against whatever
/// parameter set the graph carries.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: Config,
    pub heads: Vec<HeadSpec>,
    intent_encoder: Option<EncoderSpec>,
    item_encoder: EncoderSpec,
}

impl Network {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let heads = config.active_heads()?;
        let arch = config.variant.arch;
        let f = &config.features;
        let m = &config.model;
        let base_in = if arch.uses_short_term() {
            f.d_full() + f.d_short
        } else {
            f.d_full()
        };
        let spec = |prefix: &str, d_in: usize, d_model: usize| EncoderSpec {
            prefix: prefix.to_string(),
            d_in,
            d_model,
            layers: m.layers,
            heads: m.attn_heads,
            d_ff: m.d_ff,
            time_buckets: m.time_buckets,
            max_time_delta: m.max_time_delta.secs(),
        };
        let (intent_encoder, item_in) = if arch.is_hierarchical() {
            (
                Some(spec("intent_enc", base_in, m.d_intent)),
                base_in + m.d_proj,
            )
        } else {
            (None, base_in)
        };
        Ok(Self {
            config: config.clone(),
            heads,
            intent_encoder,
            item_encoder: spec("item_enc", item_in, m.d_item_enc),
        })
    }

    pub fn arch(&self) -> Arch {
        self.config.variant.arch
    }

    pub fn num_items(&self) -> usize {
        self.config.data.num_items
    }

    /// Freshly initialized parameters, deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut params = ParamSet::new();
        let mut init = Init::new(&mut params, seed, self.config.model.init_scale);
        let f = &self.config.features;
        features::init_feature_params(&mut init, f, self.num_items())?;
        if self.arch().uses_short_term() {
            features::init_short_params(&mut init, f)?;
        }
        if let Some(enc) = &self.intent_encoder {
            enc.init(&mut init)?;
            intent::init_heads(&mut init, &self.heads, enc.d_model)?;
            intent::init_aggregation(&mut init, &self.heads, self.config.model.d_proj)?;
        }
        self.item_encoder.init(&mut init)?;
        if self.arch() == Arch::V1 {
            intent::init_heads(&mut init, &self.heads, self.item_encoder.d_model)?;
        }
        item::init_item_head(&mut init, self.item_encoder.d_model, self.num_items())?;
        Ok(params)
    }

    pub fn forward(&self, g: &mut Graph<'_>, seq: &[Interaction]) -> Result<ForwardOut> {
        if seq.is_empty() {
            return Err(Error::validation(
                "interactions",
                "cannot encode an empty sequence",
            ));
        }
        let arch = self.arch();
        let ts: Vec<i64> = seq.iter().map(|i| i.timestamp).collect();
        let inputs =
            features::input_sequence(g, seq, &self.config.features, arch.uses_short_term())?;

        let mut heads = Vec::with_capacity(self.heads.len());
        let mut aggregate = None;
        let mut intent_enc = None;
        let item_input = match &self.intent_encoder {
            Some(enc) => {
                let e = enc.forward(g, inputs.concat, &ts)?;
                for h in &self.heads {
                    heads.push(intent::predict_head(g, e, h)?);
                }
                let scores: Vec<Var> = heads.iter().map(|h| h.scores).collect();
                let agg = intent::aggregate_intent_embedding(g, &self.heads, &scores)?;
                let x = g.concat_cols(&[inputs.concat, agg.z])?;
                intent_enc = Some(e);
                aggregate = Some(agg);
                x
            }
            None => inputs.concat,
        };
        let item_enc = self.item_encoder.forward(g, item_input, &ts)?;
        if arch == Arch::V1 {
            for h in &self.heads {
                heads.push(intent::predict_head(g, item_enc, h)?);
            }
            intent_enc = Some(item_enc);
        }
        let item_logits = item::item_logits(g, item_enc)?;
        Ok(ForwardOut {
            inputs,
            intent_enc,
            heads,
            aggregate,
            item_input,
            item_enc,
            item_logits,
        })
    }

    /// Names of the intent-head output layers (`head.<name>.{w,b}`).
    pub fn head_param_names(&self) -> Vec<String> {
        self.heads
            .iter()
            .flat_map(|h| [format!("head.{}.w", h.name), format!("head.{}.b", h.name)])
            .collect()
    }
}

/// A network together with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: Network,
    pub params: ParamSet,
}

impl Model {
    /// Initializes parameters from `config.training.seed`.
    pub fn new(config: &Config) -> Result<Self> {
        let net = Network::new(config)?;
        let params = net.init_params(config.training.seed)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &Config {
        &self.net.config
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::with_params(&self.params)
    }
}
