//! Encoder Φ, implicit decoder Ψ_s and classifier Ψ_m over one parameter store.
//!
//! Parameters are named `encoder.{i}.weight`, `encoder.{i}.bias`,
//! `decoder.{i}.*` and `classifier.{i}.*`, so a checkpoint fully determines the
//! layer widths.

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::pointcloud::{Point3, PointCloud};
use crate::tensor::{softmax, Graph, ParamId, ParamStore, Tensor, Var};

/// Point coordinates are 3-D.
const POINT_DIM: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Fixed number of points the encoder consumes per cloud.
    pub input_points: usize,
    /// Per-point MLP widths; the last one is the latent dimension.
    pub encoder_widths: Vec<usize>,
    /// Hidden decoder widths; a final width-1 layer is appended.
    pub decoder_widths: Vec<usize>,
    /// Hidden classifier widths; a final width-J layer is appended.
    pub classifier_widths: Vec<usize>,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_points: 1024,
            encoder_widths: vec![64, 128, 1024],
            decoder_widths: vec![512, 256, 128],
            classifier_widths: vec![512, 256],
            num_classes: 10,
        }
    }
}

impl ModelConfig {
    pub fn latent_dim(&self) -> usize {
        *self
            .encoder_widths
            .last()
            .expect("validated config has encoder layers")
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.input_points >= 1, "input_points must be positive");
        ensure!(
            !self.encoder_widths.is_empty(),
            "encoder needs at least one layer"
        );
        let widths = self
            .encoder_widths
            .iter()
            .chain(&self.decoder_widths)
            .chain(&self.classifier_widths);
        ensure!(
            widths.into_iter().all(|&w| w >= 1),
            "layer widths must be positive"
        );
        ensure!(self.num_classes >= 2, "num_classes must be at least 2");
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

/// The three networks and their parameters.
#[derive(Clone, Debug)]
pub struct ModelStack {
    config: ModelConfig,
    params: ParamStore,
    encoder: Vec<Layer>,
    decoder: Vec<Layer>,
    classifier: Vec<Layer>,
}

/// Initial decoder output bias. With zero bias the single output unit can
/// start below its ReLU for every query and then never receives a gradient;
/// a small positive bias keeps it active at the start.
pub const DECODER_OUTPUT_BIAS: f64 = 0.02;

fn add_layers<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    widths: &[usize],
    rng: &mut R,
) -> Result<Vec<Layer>> {
    let mut layers = Vec::with_capacity(widths.len());
    let mut inp = fan_in;
    for (i, &out) in widths.iter().enumerate() {
        let bound = 1.0 / (inp as f64).sqrt();
        let w: Vec<f64> = (0..inp * out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let weight = store.add(format!("{prefix}.{i}.weight"), Tensor::matrix(inp, out, w)?)?;
        let bias = store.add(format!("{prefix}.{i}.bias"), Tensor::zeros(&[out]))?;
        layers.push(Layer { weight, bias });
        inp = out;
    }
    Ok(layers)
}

fn find_layers(store: &ParamStore, prefix: &str) -> Result<(Vec<Layer>, Vec<usize>, usize)> {
    let mut layers = Vec::new();
    let mut widths = Vec::new();
    let mut fan_in = 0;
    for i in 0.. {
        let Some(weight) = store.find(&format!("{prefix}.{i}.weight")) else {
            break;
        };
        let bias = store
            .find(&format!("{prefix}.{i}.bias"))
            .ok_or_else(|| Error::Checkpoint(format!("{prefix}.{i}.bias missing")))?;
        let ws = store.value(weight).shape();
        let bs = store.value(bias).shape();
        if ws.len() != 2 || bs != [ws[1]] {
            return Err(Error::Checkpoint(format!(
                "{prefix}.{i}: weight {ws:?} and bias {bs:?} do not form a layer"
            )));
        }
        if i == 0 {
            fan_in = ws[0];
        } else if ws[0] != widths[i - 1] {
            return Err(Error::Checkpoint(format!(
                "{prefix}.{i}: input width {} after width {}",
                ws[0],
                widths[i - 1]
            )));
        }
        widths.push(ws[1]);
        layers.push(Layer { weight, bias });
    }
    if layers.is_empty() {
        return Err(Error::Checkpoint(format!("no {prefix} layers found")));
    }
    Ok((layers, widths, fan_in))
}

impl ModelStack {
    /// Fresh stack: weights uniform in `±1/√fan_in`, biases zero except the
    /// decoder output bias, which starts at [`DECODER_OUTPUT_BIAS`].
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let latent = config.latent_dim();
        let encoder = add_layers(
            &mut params,
            "encoder",
            POINT_DIM,
            &config.encoder_widths,
            rng,
        )?;
        let mut dec = config.decoder_widths.clone();
        dec.push(1);
        let decoder = add_layers(&mut params, "decoder", POINT_DIM + latent, &dec, rng)?;
        let out_bias = decoder.last().expect("decoder has an output layer").bias;
        params.get_mut(out_bias).value = Tensor::vector(vec![DECODER_OUTPUT_BIAS])?;
        let mut cls = config.classifier_widths.clone();
        cls.push(config.num_classes);
        let classifier = add_layers(&mut params, "classifier", latent, &cls, rng)?;
        Ok(ModelStack {
            config,
            params,
            encoder,
            decoder,
            classifier,
        })
    }

    /// Rebuilds a stack around loaded parameters; widths come from their shapes.
    pub fn from_params(params: ParamStore, input_points: usize) -> Result<Self> {
        let (encoder, enc_w, enc_in) = find_layers(&params, "encoder")?;
        let (decoder, mut dec_w, dec_in) = find_layers(&params, "decoder")?;
        let (classifier, mut cls_w, cls_in) = find_layers(&params, "classifier")?;
        let latent = *enc_w.last().unwrap();
        let bad = |m: String| Err(Error::Checkpoint(m));
        if enc_in != POINT_DIM {
            return bad(format!(
                "encoder input width {enc_in}, expected {POINT_DIM}"
            ));
        }
        if dec_in != POINT_DIM + latent || dec_w.pop() != Some(1) {
            return bad(format!(
                "decoder does not map {} inputs to one distance",
                POINT_DIM + latent
            ));
        }
        if cls_in != latent {
            return bad(format!(
                "classifier input width {cls_in}, latent is {latent}"
            ));
        }
        let num_classes = cls_w.pop().unwrap();
        let config = ModelConfig {
            input_points,
            encoder_widths: enc_w,
            decoder_widths: dec_w,
            classifier_widths: cls_w,
            num_classes,
        };
        config.validate()?;
        if params.len() != 2 * (encoder.len() + decoder.len() + classifier.len()) {
            return bad("checkpoint holds parameters outside the model".into());
        }
        Ok(ModelStack {
            config,
            params,
            encoder,
            decoder,
            classifier,
        })
    }

    pub fn load(path: &std::path::Path, input_points: usize) -> Result<Self> {
        Self::from_params(ParamStore::load(path)?, input_points)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Parameter ids of the classifier head.
    pub fn classifier_params(&self) -> Vec<ParamId> {
        self.classifier
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    pub fn tape(&self) -> Tape<'_> {
        Tape {
            graph: Graph::new(),
            model: self,
            encoder: None,
            decoder: None,
            classifier: None,
        }
    }

    /// Latent code `[F]` of a cloud with exactly `input_points` points.
    pub fn encode(&self, cloud: &PointCloud) -> Result<Tensor> {
        let mut t = self.tape();
        let c = t.encode(&[cloud])?;
        let v = t.graph.value(c).clone();
        v.reshape(vec![self.latent_dim()])
    }

    /// Predicted distance for each query, in order.
    pub fn decode(&self, queries: &[Point3], latent: &Tensor) -> Result<Vec<f64>> {
        ensure!(
            latent.len() == self.latent_dim(),
            "latent has {} entries, model expects {}",
            latent.len(),
            self.latent_dim()
        );
        ensure!(!queries.is_empty(), "decode needs at least one query");
        let mut t = self.tape();
        let q = t.graph.constant(Tensor::matrix(
            queries.len(),
            POINT_DIM,
            queries.iter().flatten().copied().collect(),
        )?);
        let c = t
            .graph
            .constant(latent.clone().reshape(vec![1, self.latent_dim()])?);
        let d = t.decode(q, c, queries.len())?;
        Ok(t.graph.value(d).data().to_vec())
    }

    /// Raw class logits `[J]` for one latent code.
    pub fn classify(&self, latent: &Tensor) -> Result<Tensor> {
        ensure!(
            latent.len() == self.latent_dim(),
            "latent has {} entries, model expects {}",
            latent.len(),
            self.latent_dim()
        );
        let mut t = self.tape();
        let c = t
            .graph
            .constant(latent.clone().reshape(vec![1, self.latent_dim()])?);
        let l = t.classify(c)?;
        t.graph.value(l).clone().reshape(vec![self.num_classes()])
    }

    /// Class probabilities of a batch of clouds.
    pub fn predict_proba(&self, clouds: &[&PointCloud]) -> Result<Vec<Vec<f64>>> {
        let mut t = self.tape();
        let c = t.encode(clouds)?;
        let l = t.classify(c)?;
        let logits = t.graph.value(l);
        Ok((0..clouds.len()).map(|r| softmax(logits.row(r))).collect())
    }
}

/// A graph under construction for one model; each sub-network's parameters
/// are placed on the tape the first time it is used.
pub struct Tape<'a> {
    pub graph: Graph,
    model: &'a ModelStack,
    encoder: Option<Vec<(Var, Var)>>,
    decoder: Option<Vec<(Var, Var)>>,
    classifier: Option<Vec<(Var, Var)>>,
}

fn bind(graph: &mut Graph, store: &ParamStore, layers: &[Layer]) -> Vec<(Var, Var)> {
    layers
        .iter()
        .map(|l| (graph.param(store, l.weight), graph.param(store, l.bias)))
        .collect()
}

impl Tape<'_> {
    fn encoder_vars(&mut self) -> Vec<(Var, Var)> {
        let (g, m) = (&mut self.graph, self.model);
        self.encoder
            .get_or_insert_with(|| bind(g, &m.params, &m.encoder))
            .clone()
    }

    fn decoder_vars(&mut self) -> Vec<(Var, Var)> {
        let (g, m) = (&mut self.graph, self.model);
        self.decoder
            .get_or_insert_with(|| bind(g, &m.params, &m.decoder))
            .clone()
    }

    fn classifier_vars(&mut self) -> Vec<(Var, Var)> {
        let (g, m) = (&mut self.graph, self.model);
        self.classifier
            .get_or_insert_with(|| bind(g, &m.params, &m.classifier))
            .clone()
    }

    /// Latents `[S×F]` of `S` clouds, each with exactly `input_points` points.
    pub fn encode(&mut self, clouds: &[&PointCloud]) -> Result<Var> {
        ensure!(!clouds.is_empty(), "encode needs at least one cloud");
        let n = self.model.config.input_points;
        let mut flat = Vec::with_capacity(clouds.len() * n * POINT_DIM);
        for c in clouds {
            ensure!(c.len() == n, "encoder expects {n} points, got {}", c.len());
            flat.extend(c.points().iter().flatten());
        }
        let x = self
            .graph
            .constant(Tensor::matrix(clouds.len() * n, POINT_DIM, flat)?);
        let layers = self.encoder_vars();
        let mut h = x;
        for (i, &(w, b)) in layers.iter().enumerate() {
            h = self.graph.linear(h, w, b)?;
            if i + 1 < layers.len() {
                h = self.graph.relu(h);
            }
        }
        self.graph.segment_max(h, clouds.len())
    }

    /// Distances `[S·K×1]` for `queries [S·K×3]` against `latents [S×F]`,
    /// where query rows are grouped `per_cloud` to a latent.
    pub fn decode(&mut self, queries: Var, latents: Var, per_cloud: usize) -> Result<Var> {
        let layers = self.decoder_vars();
        let (w0, b0) = layers[0];
        let mut h = self
            .graph
            .query_latent_linear(queries, latents, w0, b0, per_cloud)?;
        h = self.graph.relu(h);
        for &(w, b) in &layers[1..] {
            h = self.graph.linear(h, w, b)?;
            h = self.graph.relu(h);
        }
        Ok(h)
    }

    /// Logits `[S×J]`.
    pub fn classify(&mut self, latents: Var) -> Result<Var> {
        let layers = self.classifier_vars();
        let mut h = latents;
        for (i, &(w, b)) in layers.iter().enumerate() {
            h = self.graph.linear(h, w, b)?;
            if i + 1 < layers.len() {
                h = self.graph.relu(h);
            }
        }
        Ok(h)
    }
}
