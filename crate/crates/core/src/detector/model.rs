use std::collections::BTreeMap;

use super::{
    build_class_sentence, ClassSentence, Detection, DetectorConfig, DetectorError, EncodedImage,
    ImageSample, Result, Vocab,
};
use crate::boxes::BBox;
use crate::tensor::{BoundParams, Graph, ParamStore, SeededRng, Tensor, Var};

pub const PROMPT_PARAM: &str = "con.prompt";
const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Low-rank slots of one fusion layer. With `tie_qk` the query and key
/// projections of each direction share one base matrix and one pair.
pub fn projection_slots(tie_qk: bool) -> &'static [&'static str] {
    if tie_qk {
        &["qk_it", "v_it", "qk_ti", "v_ti"]
    } else {
        &["q_it", "k_it", "v_it", "q_ti", "k_ti", "v_ti"]
    }
}

/// Parameter name of the down (`"a"`) or up (`"b"`) matrix of a slot.
pub fn lora_param_name(layer: usize, slot: &str, which: &str) -> String {
    format!("inc.{layer}.{slot}.{which}")
}

fn slot_for(tie_qk: bool, role: &str, dir: &str) -> &'static str {
    match (tie_qk, role, dir) {
        (true, "q" | "k", "it") => "qk_it",
        (true, "q" | "k", _) => "qk_ti",
        (_, "v", "it") => "v_it",
        (_, "v", _) => "v_ti",
        (false, "q", "it") => "q_it",
        (false, "k", "it") => "k_it",
        (false, "q", _) => "q_ti",
        (false, _, _) => "k_ti",
        _ => unreachable!(),
    }
}

/// Lazily records base parameters into a graph, once each.
pub struct Weights<'a> {
    store: &'a ParamStore,
    vars: BTreeMap<String, Var>,
}

impl<'a> Weights<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            vars: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("detector parameter `{name}` missing"));
        let v = g.leaf(t);
        self.vars.insert(name.to_string(), v);
        v
    }

    pub fn into_bound(self) -> BoundParams {
        BoundParams::from_vars(self.vars)
    }
}

/// Memory insertion points as graph vars. Low-rank pairs are held
/// pre-transposed: `(A^T, B^T)` so that `x A^T B^T` is the update.
#[derive(Debug, Clone, Default)]
pub struct MemoryVars {
    pub prompt: Option<Var>,
    pub lora: BTreeMap<(usize, &'static str), (Var, Var)>,
}

impl MemoryVars {
    pub fn none() -> Self {
        Self::default()
    }

    /// Memory vars from parameters already bound in `g`.
    pub fn from_bound(
        g: &mut Graph,
        bound: &BoundParams,
        config: &DetectorConfig,
    ) -> Result<Self> {
        let prompt = bound.try_get(PROMPT_PARAM);
        let mut lora = BTreeMap::new();
        for layer in 0..config.fusion_layers {
            for &slot in projection_slots(config.tie_qk) {
                let (Some(a), Some(b)) = (
                    bound.try_get(&lora_param_name(layer, slot, "a")),
                    bound.try_get(&lora_param_name(layer, slot, "b")),
                ) else {
                    continue;
                };
                let at = g.transpose(a)?;
                let bt = g.transpose(b)?;
                lora.insert((layer, slot), (at, bt));
            }
        }
        Ok(Self { prompt, lora })
    }

    pub fn from_store(g: &mut Graph, store: &ParamStore, config: &DetectorConfig) -> Result<Self> {
        let bound = store.bind(g);
        Self::from_bound(g, &bound, config)
    }
}

/// Encoded text tokens; the first `prompt_len` rows are prompt positions.
#[derive(Debug, Clone, Copy)]
pub struct TextFeatures {
    pub tokens: Var,
    pub prompt_len: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `n_queries x 4` boxes, (cx, cy, w, h) after a sigmoid.
    pub boxes: Var,
    /// `n_queries x n_classes` logits.
    pub logits: Var,
    /// Outputs of the earlier decoder layers, first layer first.
    pub aux: Vec<DecoderOutput>,
}

#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    vocab: Vocab,
    params: ParamStore,
    anchors: Tensor,
    locality: Vec<Tensor>,
}

fn xavier(rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn([fan_in, fan_out], |_| rng.normal(0.0, std))
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

struct Init<'a> {
    store: ParamStore,
    rng: &'a mut SeededRng,
}

impl Init<'_> {
    fn put(&mut self, name: String, t: Tensor) {
        self.store
            .insert(name, t.trainable())
            .expect("parameter names are unique");
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) {
        let w = xavier(self.rng, din, dout);
        self.put(format!("{prefix}.w"), w);
        self.put(format!("{prefix}.b"), Tensor::zeros([1, dout]));
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.put(format!("{prefix}.g"), Tensor::from_fn([1, d], |_| 1.0));
        self.put(format!("{prefix}.b"), Tensor::zeros([1, d]));
    }

    fn attention(&mut self, prefix: &str, d: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{p}"), d, d);
        }
        self.norm(&format!("{prefix}.ln"), d);
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) {
        self.norm(&format!("{prefix}.ln"), d);
        self.linear(&format!("{prefix}.w1"), d, hidden);
        self.linear(&format!("{prefix}.w2"), hidden, d);
    }
}

impl Detector {
    /// Randomly initialized detector. The patch projection is frozen from the start.
    pub fn new(config: DetectorConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::new(&config.vocab);
        let d = config.d_model;
        let mut init = Init {
            store: ParamStore::new(),
            rng,
        };
        let pd = config.patch_dim();
        let patch = Tensor::from_fn([pd, d], |_| init.rng.normal(0.0, 1.0 / (pd as f64).sqrt()));
        init.store
            .insert("img.patch", patch)
            .expect("unique name");
        for l in 0..config.image_layers {
            init.attention(&format!("img.{l}.sa"), d);
            init.ffn(&format!("img.{l}.ffn"), d, config.ffn_dim);
        }
        let embed = Tensor::from_fn([vocab.len(), d], |_| init.rng.normal(0.0, 1.0));
        init.put("txt.embed".into(), embed);
        for l in 0..config.text_layers {
            init.attention(&format!("txt.{l}.sa"), d);
            init.ffn(&format!("txt.{l}.ffn"), d, config.text_ffn_dim);
        }
        for l in 0..config.fusion_layers {
            init.attention(&format!("fus.{l}.isa"), d);
            init.attention(&format!("fus.{l}.tsa"), d);
            for slot in projection_slots(config.tie_qk) {
                init.linear(&format!("fus.{l}.{slot}"), d, d);
            }
            init.linear(&format!("fus.{l}.o_it"), d, d);
            init.linear(&format!("fus.{l}.o_ti"), d, d);
            for n in ["ln_t1", "ln_i1", "ln_i2", "ln_t2"] {
                init.norm(&format!("fus.{l}.{n}"), d);
            }
            init.ffn(&format!("fus.{l}.ffn_i"), d, config.ffn_dim);
            init.ffn(&format!("fus.{l}.ffn_t"), d, config.ffn_dim);
        }
        let nq = config.n_queries;
        let query = Tensor::from_fn([nq, d], |_| init.rng.normal(0.0, 1.0));
        init.put("dec.query".into(), query);
        init.norm("enc.ln", d);
        init.linear("enc.box1", d, d);
        init.linear("enc.box2", d, 4);
        if let Some(w) = init.store.get_mut("enc.box2.w") {
            w.data_mut().iter_mut().for_each(|x| *x *= 0.01);
        }
        init.linear("enc.cls", d, d);
        init.put("enc.cls_bias".into(), Tensor::scalar(logit(0.01)));
        init.linear("dec.refpos", 4, d);
        for l in 0..config.decoder_layers {
            init.attention(&format!("dec.{l}.sa"), d);
            init.attention(&format!("dec.{l}.ca"), d);
            init.norm(&format!("dec.{l}.ln_mem"), d);
            init.ffn(&format!("dec.{l}.ffn"), d, config.decoder_ffn_dim);
        }
        init.norm("dec.ln_out", d);
        init.norm("dec.ln_txt", d);
        init.linear("dec.box1", d, d);
        init.linear("dec.box2", d, 4);
        if let Some(w) = init.store.get_mut("dec.box2.w") {
            w.data_mut().iter_mut().for_each(|x| *x *= 0.01);
        }
        init.linear("dec.cls", d, d);
        init.put("dec.cls_bias".into(), Tensor::scalar(logit(0.01)));
        let params = init.store;
        Ok(Self {
            anchors: grid_anchors(config.image_grid),
            locality: locality_biases(config.image_grid, config.n_heads),
            config,
            vocab,
            params,
        })
    }

    /// Detector from a configuration and previously trained parameters.
    pub fn from_parts(config: DetectorConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut probe = SeededRng::new(0);
        let template = Self::new(config.clone(), &mut probe)?;
        for (name, t) in template.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(DetectorError::Config(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(DetectorError::Config(format!("parameter `{name}` missing"))),
            }
        }
        if params.len() != template.params.len() {
            return Err(DetectorError::Config("unexpected extra parameters".into()));
        }
        Ok(Self {
            vocab: Vocab::new(&config.vocab),
            anchors: grid_anchors(config.image_grid),
            locality: locality_biases(config.image_grid, config.n_heads),
            config,
            params,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Freeze everything; the frozen state is what continual steps build on.
    pub fn freeze(&mut self) {
        self.params.freeze_all();
    }

    pub fn sentence<S: AsRef<str>>(&self, names: &[S]) -> Result<ClassSentence> {
        build_class_sentence(names, &self.vocab)
    }

    /// Flatten an image into `tokens x patch_dim` rows of pixels centered at zero.
    pub fn patchify(&self, image: &ImageSample) -> Result<Tensor> {
        let (h, w) = self.config.image_size();
        if image.height != h || image.width != w {
            return Err(DetectorError::Input(format!(
                "image is {}x{}, detector expects {h}x{w}",
                image.height, image.width
            )));
        }
        let ps = self.config.patch_size;
        let (gh, gw) = self.config.image_grid;
        let pd = self.config.patch_dim();
        let mut data = Vec::with_capacity(gh * gw * pd);
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..ps {
                    for px in 0..ps {
                        for c in 0..3 {
                            data.push(image.pixel(gy * ps + py, gx * ps + px, c) - 0.5);
                        }
                    }
                }
            }
        }
        Ok(Tensor::new([gh * gw, pd], data)?)
    }

    /// Fixed 2-D sinusoidal encoding, centered so its mean over positions is zero.
    pub fn pos_encoding(&self) -> Tensor {
        let (gh, gw) = self.config.image_grid;
        let d = self.config.d_model;
        let half = d / 2;
        let n = gh * gw;
        let mut t = Tensor::zeros([n, d]);
        if !self.config.use_pos_enc {
            return t;
        }
        let data = t.data_mut();
        for r in 0..gh {
            for c in 0..gw {
                let tok = r * gw + c;
                for i in 0..d {
                    let (coord, j) = if i < half { (r, i) } else { (c, i - half) };
                    let freq = 1.0 / 10_f64.powf((j / 2) as f64 * 4.0 / half as f64);
                    let x = coord as f64 * freq;
                    data[tok * d + i] = 0.5 * if j % 2 == 0 { x.sin() } else { x.cos() };
                }
            }
        }
        for i in 0..d {
            let mean = (0..n).map(|k| data[k * d + i]).sum::<f64>() / n as f64;
            for k in 0..n {
                data[k * d + i] -= mean;
            }
        }
        t
    }

    fn linear(&self, g: &mut Graph, w: &mut Weights, x: Var, prefix: &str) -> Result<Var> {
        let wt = w.get(g, &format!("{prefix}.w"));
        let b = w.get(g, &format!("{prefix}.b"));
        let y = g.matmul(x, wt)?;
        Ok(g.add(y, b)?)
    }

    fn norm(&self, g: &mut Graph, w: &mut Weights, x: Var, prefix: &str) -> Result<Var> {
        let gamma = w.get(g, &format!("{prefix}.g"));
        let beta = w.get(g, &format!("{prefix}.b"));
        let y = g.layer_norm(x, LN_EPS);
        let y = g.mul(y, gamma)?;
        Ok(g.add(y, beta)?)
    }

    fn heads(&self, g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
        self.biased_heads(g, q, k, v, &[])
    }

    /// Multi-head attention with additive `queries x keys` score biases: none
    /// when `bias` is empty, one shared by all heads, or one per head.
    fn biased_heads(&self, g: &mut Graph, q: Var, k: Var, v: Var, bias: &[Var]) -> Result<Var> {
        let d = g.shape(q)[1];
        let nh = self.config.n_heads;
        let dh = d / nh;
        let q = g.scale(q, 1.0 / (dh as f64).sqrt());
        let kt = g.transpose(k)?;
        let mut outs = Vec::with_capacity(nh);
        for h in 0..nh {
            let qh = g.slice(q, 1, h * dh, (h + 1) * dh)?;
            let kh = g.slice(kt, 0, h * dh, (h + 1) * dh)?;
            let vh = g.slice(v, 1, h * dh, (h + 1) * dh)?;
            let mut s = g.matmul(qh, kh)?;
            if let Some(&b) = bias.get(h).or(bias.first()) {
                s = g.add(s, b)?;
            }
            let a = g.softmax(s);
            outs.push(g.matmul(a, vh)?);
        }
        Ok(g.concat(&outs, 1)?)
    }

    /// Pre-norm self-attention with residual.
    fn self_attention(&self, g: &mut Graph, w: &mut Weights, x: Var, prefix: &str) -> Result<Var> {
        self.biased_self_attention(g, w, x, prefix, &[])
    }

    fn biased_self_attention(
        &self,
        g: &mut Graph,
        w: &mut Weights,
        x: Var,
        prefix: &str,
        bias: &[Var],
    ) -> Result<Var> {
        let h = self.norm(g, w, x, &format!("{prefix}.ln"))?;
        let q = self.linear(g, w, h, &format!("{prefix}.q"))?;
        let k = self.linear(g, w, h, &format!("{prefix}.k"))?;
        let v = self.linear(g, w, h, &format!("{prefix}.v"))?;
        let o = self.biased_heads(g, q, k, v, bias)?;
        let o = self.linear(g, w, o, &format!("{prefix}.o"))?;
        Ok(g.add(x, o)?)
    }

    fn feed_forward(&self, g: &mut Graph, w: &mut Weights, x: Var, prefix: &str) -> Result<Var> {
        let h = self.norm(g, w, x, &format!("{prefix}.ln"))?;
        let h = self.linear(g, w, h, &format!("{prefix}.w1"))?;
        let h = g.relu(h);
        let h = self.linear(g, w, h, &format!("{prefix}.w2"))?;
        Ok(g.add(x, h)?)
    }

    /// Image encoder on a patchified image, returning grid tokens.
    pub fn image_tokens(&self, g: &mut Graph, w: &mut Weights, patches: &Tensor) -> Result<Var> {
        let x = g.leaf(patches);
        let proj = w.get(g, "img.patch");
        let mut x = g.matmul(x, proj)?;
        if self.config.use_pos_enc {
            let pos = g.leaf(&self.pos_encoding());
            x = g.add(x, pos)?;
        }
        let local: Vec<Var> = self.locality.iter().map(|b| g.leaf(b)).collect();
        for l in 0..self.config.image_layers {
            x = self.biased_self_attention(g, w, x, &format!("img.{l}.sa"), &local)?;
            x = self.feed_forward(g, w, x, &format!("img.{l}.ffn"))?;
        }
        Ok(x)
    }

    /// Unit-norm mean of the grid tokens.
    pub fn global_embedding(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let m = g.mean_axis(tokens, 0)?;
        Ok(g.l2_normalize(m, NORM_EPS))
    }

    pub fn encode_image(&self, image: &ImageSample) -> Result<EncodedImage> {
        let patches = self.patchify(image)?;
        let mut g = Graph::new();
        let mut w = Weights::new(&self.params);
        let tokens = self.image_tokens(&mut g, &mut w, &patches)?;
        let global = self.global_embedding(&mut g, tokens)?;
        Ok(EncodedImage {
            tokens: g.value(tokens),
            global: g.data(global).to_vec(),
        })
    }

    /// Embed the sentence, prepend the prompt if given, and run the text encoder.
    pub fn encode_text(
        &self,
        g: &mut Graph,
        w: &mut Weights,
        sentence: &ClassSentence,
        prompt: Option<Var>,
    ) -> Result<TextFeatures> {
        let v = self.vocab.len();
        if let Some(&bad) = sentence.token_ids.iter().find(|&&t| t >= v) {
            return Err(DetectorError::Vocab(format!("token id {bad}")));
        }
        let n = sentence.num_tokens();
        let mut onehot = vec![0.0; n * v];
        for (i, &t) in sentence.token_ids.iter().enumerate() {
            onehot[i * v + t] = 1.0;
        }
        let oh = g.constant([n, v], onehot)?;
        let embed = w.get(g, "txt.embed");
        let mut x = g.matmul(oh, embed)?;
        let mut prompt_len = 0;
        if let Some(p) = prompt {
            prompt_len = g.shape(p)[0];
            x = g.concat(&[p, x], 0)?;
        }
        for l in 0..self.config.text_layers {
            x = self.self_attention(g, w, x, &format!("txt.{l}.sa"))?;
            x = self.feed_forward(g, w, x, &format!("txt.{l}.ffn"))?;
        }
        Ok(TextFeatures {
            tokens: x,
            prompt_len,
        })
    }

    /// Base projection of a slot plus its low-rank update when present.
    fn projection(
        &self,
        g: &mut Graph,
        w: &mut Weights,
        x: Var,
        layer: usize,
        slot: &'static str,
        mem: &MemoryVars,
    ) -> Result<Var> {
        let y = self.linear(g, w, x, &format!("fus.{layer}.{slot}"))?;
        match mem.lora.get(&(layer, slot)) {
            Some(&(at, bt)) => {
                let down = g.matmul(x, at)?;
                let up = g.matmul(down, bt)?;
                Ok(g.add(y, up)?)
            }
            None => Ok(y),
        }
    }

    /// One image/text fusion layer: self-attention on both streams, text-side
    /// cross-attention (text queries over image keys/values), image-side
    /// cross-attention (image queries over the aggregated text), feed-forward.
    pub fn fusion_layer(
        &self,
        g: &mut Graph,
        w: &mut Weights,
        layer: usize,
        image: Var,
        text: Var,
        mem: &MemoryVars,
    ) -> Result<(Var, Var)> {
        let tie = self.config.tie_qk;
        let fi_hat = self.self_attention(g, w, image, &format!("fus.{layer}.isa"))?;
        let ft_hat = self.self_attention(g, w, text, &format!("fus.{layer}.tsa"))?;

        let t_in = self.norm(g, w, ft_hat, &format!("fus.{layer}.ln_t1"))?;
        let i_in = self.norm(g, w, fi_hat, &format!("fus.{layer}.ln_i1"))?;
        let q_t = self.projection(g, w, t_in, layer, slot_for(tie, "q", "it"), mem)?;
        let k_i = self.projection(g, w, i_in, layer, slot_for(tie, "k", "it"), mem)?;
        let v_i = self.projection(g, w, i_in, layer, slot_for(tie, "v", "it"), mem)?;
        let agg_t = self.heads(g, q_t, k_i, v_i)?;
        let agg_t = self.linear(g, w, agg_t, &format!("fus.{layer}.o_it"))?;
        let ft_tilde = g.add(ft_hat, agg_t)?;

        let i_in = self.norm(g, w, fi_hat, &format!("fus.{layer}.ln_i2"))?;
        let t_in = self.norm(g, w, ft_tilde, &format!("fus.{layer}.ln_t2"))?;
        let q_i = self.projection(g, w, i_in, layer, slot_for(tie, "q", "ti"), mem)?;
        let k_t = self.projection(g, w, t_in, layer, slot_for(tie, "k", "ti"), mem)?;
        let v_t = self.projection(g, w, t_in, layer, slot_for(tie, "v", "ti"), mem)?;
        let agg_i = self.heads(g, q_i, k_t, v_t)?;
        let agg_i = self.linear(g, w, agg_i, &format!("fus.{layer}.o_ti"))?;
        let fi_tilde = g.add(fi_hat, agg_i)?;

        let fi_out = self.feed_forward(g, w, fi_tilde, &format!("fus.{layer}.ffn_i"))?;
        let ft_out = self.feed_forward(g, w, ft_tilde, &format!("fus.{layer}.ffn_t"))?;
        Ok((fi_out, ft_out))
    }

    /// Span-mean pooling matrix (`n_classes x (prompt_len + n_tokens)`); prompt columns are zero.
    fn pooling_matrix(sentence: &ClassSentence, prompt_len: usize) -> Tensor {
        let cols = prompt_len + sentence.num_tokens();
        let mut m = Tensor::zeros([sentence.num_classes(), cols]);
        let data = m.data_mut();
        for (c, span) in sentence.spans.iter().enumerate() {
            let wgt = 1.0 / span.len() as f64;
            for t in span.clone() {
                data[c * cols + prompt_len + t] = wgt;
            }
        }
        m
    }

    /// Gaussian log-weights of every grid cell around each box, with the box
    /// half-extent as the standard deviation. Differentiable in `boxes`.
    fn spatial_prior(&self, g: &mut Graph, boxes: Var) -> Result<Var> {
        let (gh, gw) = self.config.image_grid;
        let n = gh * gw;
        let nq = g.shape(boxes)[0];
        let ones_row = g.constant([1, n], vec![1.0; n])?;
        let ones_col = g.constant([nq, 1], vec![1.0; nq])?;
        let cells_x = g.constant([1, n], (0..n).map(|c| ((c % gw) as f64 + 0.5) / gw as f64).collect())?;
        let cells_y = g.constant([1, n], (0..n).map(|c| ((c / gw) as f64 + 0.5) / gh as f64).collect())?;
        let mut sq = Vec::with_capacity(2);
        for (axis, cells) in [(0, cells_x), (1, cells_y)] {
            let center = g.slice(boxes, 1, axis, axis + 1)?;
            let half = g.slice(boxes, 1, axis + 2, axis + 3)?;
            let half = g.scale(half, 0.5);
            let inv = g.div(ones_col, half)?;
            let center = g.matmul(center, ones_row)?;
            let inv = g.matmul(inv, ones_row)?;
            let neg = g.scale(center, -1.0);
            let d = g.add(neg, cells)?;
            let z = g.mul(d, inv)?;
            sq.push(g.mul(z, z)?);
        }
        let s = g.add(sq[0], sq[1])?;
        Ok(g.scale(s, -0.5))
    }

    /// Scaled query/text dot products plus the shared bias `bias_name`.
    fn class_logits(&self, g: &mut Graph, w: &mut Weights, q: Var, cls_t: Var, bias_name: &str) -> Result<Var> {
        let d = self.config.d_model;
        let logits = g.matmul(q, cls_t)?;
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
        let bias = w.get(g, bias_name);
        Ok(g.add(logits, bias)?)
    }

    /// Boxes and class logits of decoder state `x`, refining `raw` (box logits).
    fn heads_out(
        &self,
        g: &mut Graph,
        w: &mut Weights,
        x: Var,
        raw: Var,
        cls_t: Var,
    ) -> Result<(Var, DecoderOutput)> {
        let hq = self.norm(g, w, x, "dec.ln_out")?;
        let b = self.linear(g, w, hq, "dec.box1")?;
        let b = g.relu(b);
        let delta = self.linear(g, w, b, "dec.box2")?;
        let raw = g.add(raw, delta)?;
        let boxes = g.sigmoid(raw);
        let cls_q = self.linear(g, w, hq, "dec.cls")?;
        let logits = self.class_logits(g, w, cls_q, cls_t, "dec.cls_bias")?;
        Ok((raw, DecoderOutput { boxes, logits, aux: Vec::new() }))
    }

    /// Per-token proposals: box logits around each grid cell and class logits.
    fn proposals(&self, g: &mut Graph, w: &mut Weights, image: Var, cls_t: Var) -> Result<(Var, DecoderOutput)> {
        let h = self.norm(g, w, image, "enc.ln")?;
        let b = self.linear(g, w, h, "enc.box1")?;
        let b = g.relu(b);
        let delta = self.linear(g, w, b, "enc.box2")?;
        let anchors = g.leaf(&self.anchors);
        let raw = g.add(anchors, delta)?;
        let boxes = g.sigmoid(raw);
        let cls_q = self.linear(g, w, h, "enc.cls")?;
        let logits = self.class_logits(g, w, cls_q, cls_t, "enc.cls_bias")?;
        Ok((raw, DecoderOutput { boxes, logits, aux: Vec::new() }))
    }

    /// One-hot rows picking the `k` tokens with the highest best-class logit;
    /// ties go to the lower token index.
    fn select_top(logits: &[f64], n_classes: usize, k: usize) -> Tensor {
        let n = logits.len() / n_classes;
        let best: Vec<f64> = logits
            .chunks(n_classes)
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| best[b].total_cmp(&best[a]).then(a.cmp(&b)));
        let mut sel = Tensor::zeros([k, n]);
        let data = sel.data_mut();
        for (r, &t) in order.iter().take(k).enumerate() {
            data[r * n + t] = 1.0;
        }
        sel
    }

    /// Token proposals seed the reference boxes of the learned queries, which
    /// attend the image around their current boxes; every layer refines the
    /// boxes. `aux` holds the proposals, then every decoder layer but the last.
    pub fn decode(
        &self,
        g: &mut Graph,
        w: &mut Weights,
        image: Var,
        text: TextFeatures,
        sentence: &ClassSentence,
    ) -> Result<DecoderOutput> {
        let pool = g.leaf(&Self::pooling_matrix(sentence, text.prompt_len));
        let cls_txt = g.matmul(pool, text.tokens)?;
        let cls_txt = self.norm(g, w, cls_txt, "dec.ln_txt")?;
        let cls_t = g.transpose(cls_txt)?;

        let (enc_raw, enc) = self.proposals(g, w, image, cls_t)?;
        let sel = Self::select_top(g.data(enc.logits), sentence.num_classes(), self.config.n_queries);
        let sel = g.leaf(&sel);
        let mut raw = g.matmul(sel, enc_raw)?;
        let mut boxes = g.sigmoid(raw);
        let mut x = w.get(g, "dec.query");
        let mut aux = vec![enc];
        let mut out = None;
        for l in 0..self.config.decoder_layers {
            let qpos = self.linear(g, w, boxes, "dec.refpos")?;
            let prior = self.spatial_prior(g, boxes)?;
            let p = format!("dec.{l}.sa");
            let h = self.norm(g, w, x, &format!("{p}.ln"))?;
            let h = g.add(h, qpos)?;
            let q = self.linear(g, w, h, &format!("{p}.q"))?;
            let k = self.linear(g, w, h, &format!("{p}.k"))?;
            let v = self.linear(g, w, h, &format!("{p}.v"))?;
            let o = self.heads(g, q, k, v)?;
            let o = self.linear(g, w, o, &format!("{p}.o"))?;
            x = g.add(x, o)?;

            let p = format!("dec.{l}.ca");
            let h = self.norm(g, w, x, &format!("{p}.ln"))?;
            let h = g.add(h, qpos)?;
            let mem = self.norm(g, w, image, &format!("dec.{l}.ln_mem"))?;
            let q = self.linear(g, w, h, &format!("{p}.q"))?;
            let k = self.linear(g, w, mem, &format!("{p}.k"))?;
            let v = self.linear(g, w, mem, &format!("{p}.v"))?;
            let o = self.biased_heads(g, q, k, v, &[prior])?;
            let o = self.linear(g, w, o, &format!("{p}.o"))?;
            x = g.add(x, o)?;

            x = self.feed_forward(g, w, x, &format!("dec.{l}.ffn"))?;
            let (r, o) = self.heads_out(g, w, x, raw, cls_t)?;
            raw = r;
            boxes = o.boxes;
            if let Some(prev) = out.replace(o) {
                aux.push(prev);
            }
        }
        let mut out = match out {
            Some(o) => o,
            None => self.heads_out(g, w, x, raw, cls_t)?.1,
        };
        out.aux = aux;
        Ok(out)
    }

    /// Fusion and decoding from already-encoded text.
    pub fn forward_with_text(
        &self,
        g: &mut Graph,
        w: &mut Weights,
        image: Var,
        text: TextFeatures,
        sentence: &ClassSentence,
        mem: &MemoryVars,
    ) -> Result<DecoderOutput> {
        let (mut fi, mut ft) = (image, text.tokens);
        for l in 0..self.config.fusion_layers {
            (fi, ft) = self.fusion_layer(g, w, l, fi, ft, mem)?;
        }
        let text = TextFeatures {
            tokens: ft,
            prompt_len: text.prompt_len,
        };
        self.decode(g, w, fi, text, sentence)
    }

    /// Full pass from encoder tokens to decoder outputs.
    pub fn forward(
        &self,
        g: &mut Graph,
        w: &mut Weights,
        image: Var,
        sentence: &ClassSentence,
        mem: &MemoryVars,
    ) -> Result<DecoderOutput> {
        let text = self.encode_text(g, w, sentence, mem.prompt)?;
        self.forward_with_text(g, w, image, text, sentence, mem)
    }

    /// Argmax class and sigmoid score for every query.
    pub fn detections(&self, g: &Graph, out: &DecoderOutput, sentence: &ClassSentence) -> Vec<Detection> {
        let boxes = g.data(out.boxes);
        let logits = g.data(out.logits);
        let nc = sentence.num_classes();
        (0..self.config.n_queries)
            .map(|q| {
                let row = &logits[q * nc..(q + 1) * nc];
                let (best, &l) = row
                    .iter()
                    .enumerate()
                    .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
                let b = &boxes[q * 4..q * 4 + 4];
                Detection {
                    bbox: clamp_box(BBox::new(b[0], b[1], b[2], b[3])),
                    class_name: sentence.names[best].clone(),
                    score: crate::tensor::sigmoid(l),
                }
            })
            .collect()
    }

    /// Inference on an encoded image with optional step memories.
    pub fn detect(
        &self,
        encoded: &EncodedImage,
        sentence: &ClassSentence,
        memories: Option<&ParamStore>,
    ) -> Result<Vec<Detection>> {
        let mut g = Graph::new();
        let mem = match memories {
            Some(store) => MemoryVars::from_store(&mut g, store, &self.config)?,
            None => MemoryVars::none(),
        };
        let mut w = Weights::new(&self.params);
        let tokens = g.leaf(&encoded.tokens);
        let out = self.forward(&mut g, &mut w, tokens, sentence, &mem)?;
        Ok(self.detections(&g, &out, sentence))
    }
}

/// Clip a sigmoid-parameterized box so its corners stay inside the unit square.
fn clamp_box(b: BBox) -> BBox {
    let [x1, y1, x2, y2] = b.xyxy();
    let (x1, y1) = (x1.max(0.0), y1.max(0.0));
    let (x2, y2) = (x2.min(1.0), y2.min(1.0));
    let w = (x2 - x1).max(1e-6);
    let h = (y2 - y1).max(1e-6);
    BBox::new((x1 + 0.5 * w).min(1.0 - 0.5 * w), (y1 + 0.5 * h).min(1.0 - 0.5 * h), w, h)
}

/// Per-head Gaussian distance biases between grid cells for the image
/// encoder: head `h` has a width of `2^h` cells and the last head is global.
fn locality_biases((gh, gw): (usize, usize), n_heads: usize) -> Vec<Tensor> {
    let n = gh * gw;
    (0..n_heads)
        .map(|h| {
            if h + 1 == n_heads {
                return Tensor::zeros([n, n]);
            }
            let sigma = (1usize << h) as f64;
            Tensor::from_fn([n, n], |i| {
                let (a, b) = (i / n, i % n);
                let dy = (a / gw) as f64 - (b / gw) as f64;
                let dx = (a % gw) as f64 - (b % gw) as f64;
                -(dx * dx + dy * dy) / (2.0 * sigma * sigma)
            })
        })
        .collect()
}

/// One box per grid cell, centered on the cell, stored as logits.
fn grid_anchors((gh, gw): (usize, usize)) -> Tensor {
    let mut data = Vec::with_capacity(gh * gw * 4);
    for y in 0..gh {
        for x in 0..gw {
            let cx = (x as f64 + 0.5) / gw as f64;
            let cy = (y as f64 + 0.5) / gh as f64;
            data.extend_from_slice(&[logit(cx), logit(cy), logit(0.25), logit(0.25)]);
        }
    }
    Tensor::new([gh * gw, 4], data).expect("anchor shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> DetectorConfig {
        DetectorConfig {
            d_model: 8,
            n_heads: 2,
            fusion_layers: 2,
            n_queries: 4,
            image_grid: (3, 3),
            patch_size: 2,
            prompt_length: 3,
            lora_rank: 2,
            lora_layers: 2,
            image_layers: 1,
            text_layers: 1,
            decoder_layers: 1,
            ffn_dim: 8,
            text_ffn_dim: 8,
            decoder_ffn_dim: 8,
            vocab: ["red", "blue", "circle", "square"].map(String::from).to_vec(),
            ..Default::default()
        }
    }

    fn image(cfg: &DetectorConfig, seed: u64) -> ImageSample {
        let (h, w) = cfg.image_size();
        let mut rng = SeededRng::new(seed);
        ImageSample::new(h, w, (0..h * w * 3).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn rejects_wrong_image_size() {
        let cfg = tiny_config();
        let det = Detector::new(cfg, &mut SeededRng::new(1)).unwrap();
        let img = ImageSample::new(5, 5, vec![0.0; 75]).unwrap();
        assert!(matches!(det.encode_image(&img), Err(DetectorError::Input(_))));
    }

    #[test]
    fn global_embedding_is_unit() {
        let cfg = tiny_config();
        let det = Detector::new(cfg.clone(), &mut SeededRng::new(1)).unwrap();
        let e = det.encode_image(&image(&cfg, 2)).unwrap();
        let n: f64 = e.global.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        let again = det.encode_image(&image(&cfg, 2)).unwrap();
        assert_eq!(e, again);
    }

    #[test]
    fn zero_image_without_positions_has_identical_tokens() {
        let mut cfg = tiny_config();
        cfg.use_pos_enc = false;
        let det = Detector::new(cfg.clone(), &mut SeededRng::new(4)).unwrap();
        let (h, w) = cfg.image_size();
        let img = ImageSample::new(h, w, vec![0.0; h * w * 3]).unwrap();
        let e = det.encode_image(&img).unwrap();
        for r in 1..e.tokens.rows() {
            let diff: f64 = e.tokens.row(r).iter().zip(e.tokens.row(0)).map(|(a, b)| (a - b).abs()).sum();
            assert!(diff < 1e-12);
        }
        let n: f64 = e.global.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn prompt_extends_text_length() {
        let cfg = tiny_config();
        let det = Detector::new(cfg.clone(), &mut SeededRng::new(1)).unwrap();
        let s = det.sentence(&["red circle", "blue square"]).unwrap();
        let mut g = Graph::new();
        let mut w = Weights::new(det.params());
        let plain = det.encode_text(&mut g, &mut w, &s, None).unwrap();
        assert_eq!(g.shape(plain.tokens)[0], s.num_tokens());
        let p = g.leaf(&Tensor::zeros([3, cfg.d_model]));
        let with = det.encode_text(&mut g, &mut w, &s, Some(p)).unwrap();
        assert_eq!(g.shape(with.tokens)[0], s.num_tokens() + 3);
        assert_eq!(with.prompt_len, 3);
    }

    #[test]
    fn detections_cover_all_queries_and_stay_in_unit_square() {
        let cfg = tiny_config();
        let det = Detector::new(cfg.clone(), &mut SeededRng::new(1)).unwrap();
        let enc = det.encode_image(&image(&cfg, 9)).unwrap();
        let s = det.sentence(&["red circle"]).unwrap();
        let dets = det.detect(&enc, &s, None).unwrap();
        assert_eq!(dets.len(), cfg.n_queries);
        for d in &dets {
            assert_eq!(d.class_name, "red circle");
            assert!(d.bbox.is_normalized());
            assert!((0.0..=1.0).contains(&d.score));
        }
    }

    #[test]
    fn rank_above_width_is_config_error() {
        let mut cfg = tiny_config();
        cfg.lora_rank = 9;
        assert!(matches!(cfg.validate(), Err(DetectorError::Config(_))));
    }

    #[test]
    fn one_dimensional_low_rank_projection() {
        // base weight 2, A = 1, B = 3, input 1: (W + BA) x = 5
        let mut g = Graph::new();
        let x = g.constant([1, 1], vec![1.0]).unwrap();
        let wt = g.constant([1, 1], vec![2.0]).unwrap();
        let at = g.constant([1, 1], vec![1.0]).unwrap();
        let bt = g.constant([1, 1], vec![3.0]).unwrap();
        let base = g.matmul(x, wt).unwrap();
        let down = g.matmul(x, at).unwrap();
        let up = g.matmul(down, bt).unwrap();
        let y = g.add(base, up).unwrap();
        assert_eq!(g.item(y), 5.0);
    }
}
