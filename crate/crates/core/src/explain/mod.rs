//! Contrastive explanations: pick an exemplar of the contrast class, then walk
//! the class latent from the query to the exemplar and decode each state.

mod graph;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::conditioning::{CdModel, Discriminator};
use crate::dvae::Dvae;
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, Image};

pub use graph::{
    brute_force_shortest, count_paths, edge_weight, lattice_edges, shortest_path, weak_ordering_paths, Edge,
    InterpGraph, ShortestPath, MAX_GRAPH_DIMS,
};

/// Number of smooth interpolation states.
pub const SMOOTH_STATES: usize = 5;
/// Per-dimension difference above which `interp_dim` treats a dimension as
/// significant (one prior standard deviation).
pub const SIGNIFICANT_DELTA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphParams {
    pub t: f64,
    pub alpha_g: f64,
    pub beta_g: f64,
    pub gamma_g: f64,
    pub delta_min: f64,
    /// Only dimensions differing by more than `SIGNIFICANT_DELTA` enter the
    /// graph.
    pub significant_only: bool,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            t: 0.95,
            alpha_g: 0.5,
            beta_g: 1.0,
            gamma_g: 1.0,
            delta_min: 1e-3,
            significant_only: false,
        }
    }
}

impl GraphParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t <= 1.0) {
            return Err(Error::invalid(format!("exemplar threshold {} outside (0, 1]", self.t)));
        }
        for (name, v) in [
            ("alpha_g", self.alpha_g),
            ("beta_g", self.beta_g),
            ("gamma_g", self.gamma_g),
            ("delta_min", self.delta_min),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    fn graph_threshold(&self) -> f64 {
        if self.significant_only {
            SIGNIFICANT_DELTA.max(self.delta_min)
        } else {
            self.delta_min
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "sm")]
    Smooth,
    #[serde(rename = "dim")]
    Dim,
    #[serde(rename = "graph")]
    Graph,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Smooth, Method::Dim, Method::Graph];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Smooth => "sm",
            Method::Dim => "dim",
            Method::Graph => "graph",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Method> {
        match s {
            "sm" | "smooth" => Ok(Method::Smooth),
            "dim" => Ok(Method::Dim),
            "graph" => Ok(Method::Graph),
            _ => Err(Error::invalid(format!("unknown explanation method {s:?}"))),
        }
    }
}

/// A latent walk from the query to the exemplar. `latents[0]` is the query's
/// `mu_y` and `states[0]` its decoding; every later entry is one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub method: Method,
    pub latents: Vec<Vec<f64>>,
    /// Dimensions switched by each step, `latents.len() - 1` entries.
    pub changed: Vec<Vec<usize>>,
    /// Graph edge costs along the path; empty for the other methods.
    pub edge_costs: Vec<f64>,
    pub mu_x: Vec<f64>,
    pub exemplar: Option<usize>,
    #[serde(skip)]
    pub states: Vec<Image>,
}

impl Explanation {
    pub fn n_steps(&self) -> usize {
        self.latents.len().saturating_sub(1)
    }
}

fn check_widths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("latent widths differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

fn differing(a: &[f64], b: &[f64]) -> Vec<usize> {
    (0..a.len()).filter(|&i| a[i] != b[i]).collect()
}

/// Latents at fractions `k/5`, `k = 1..=5`; the last state is `b` exactly.
pub fn interp_smooth(a: &[f64], b: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_widths(a, b)?;
    Ok((1..=SMOOTH_STATES)
        .map(|k| {
            if k == SMOOTH_STATES {
                return b.to_vec();
            }
            let f = k as f64 / SMOOTH_STATES as f64;
            a.iter().zip(b).map(|(&x, &y)| x + f * (y - x)).collect()
        })
        .collect())
}

/// First switches every non-significant dimension at once (skipped when none
/// differ), then one significant dimension per step in ascending order.
/// Returns the states after each step and the dimensions each step switched.
pub fn interp_dim(a: &[f64], b: &[f64], thresh: f64) -> Result<(Vec<Vec<f64>>, Vec<Vec<usize>>)> {
    check_widths(a, b)?;
    let (sig, minor): (Vec<usize>, Vec<usize>) = (0..a.len()).partition(|&i| (a[i] - b[i]).abs() > thresh);
    let minor: Vec<usize> = minor.into_iter().filter(|&i| a[i] != b[i]).collect();
    let mut cur = a.to_vec();
    let mut states = Vec::new();
    let mut changed = Vec::new();
    if !minor.is_empty() {
        for &i in &minor {
            cur[i] = b[i];
        }
        states.push(cur.clone());
        changed.push(minor);
    }
    for i in sig {
        cur[i] = b[i];
        states.push(cur.clone());
        changed.push(vec![i]);
    }
    Ok((states, changed))
}

/// Decodes class latents together with one fixed residual latent.
pub trait LatentDecoder {
    fn decode_states(&self, z_y: &[Vec<f64>], mu_x: &[f64]) -> Result<Vec<Image>>;
}

/// Scores realism and change quality of decoded images.
pub trait Critic {
    /// Probability that each image is real.
    fn realism(&self, images: &[Image]) -> Result<Vec<f64>>;
    /// Probability that each `(from, to)` change between `images` is good.
    fn change_quality(&self, images: &[Image], pairs: &[(usize, usize)]) -> Result<Vec<f64>>;
}

fn rows_tensor(rows: &[Vec<f64>], width: usize, kind: Kind) -> Result<Tensor> {
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::invalid(format!("latent rows must have width {width}")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_slice(&flat).reshape([rows.len() as i64, width as i64]).to_kind(kind))
}

impl LatentDecoder for Dvae {
    fn decode_states(&self, z_y: &[Vec<f64>], mu_x: &[f64]) -> Result<Vec<Image>> {
        if z_y.is_empty() {
            return Ok(Vec::new());
        }
        let zy = rows_tensor(z_y, self.params.n_y, self.kind())?.to_device(self.device());
        let zx = rows_tensor(&[mu_x.to_vec()], self.params.n_x, self.kind())?
            .to_device(self.device())
            .expand([z_y.len() as i64, self.params.n_x as i64], false);
        Ok(self.decode_images(&zy, &zx))
    }
}

/// The trained realism discriminator and change discriminator, evaluated in
/// evaluation mode.
pub struct ModelCritic<'a> {
    pub d: &'a Discriminator,
    pub cd: &'a CdModel,
    pub batch: usize,
}

impl Critic for ModelCritic<'_> {
    fn realism(&self, images: &[Image]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(self.batch.max(1)) {
            let x = images_to_tensor(chunk, self.d.kind()).to_device(self.d.vs.device());
            let p = self.d.prob_real(&x).to_kind(Kind::Double).to_device(tch::Device::Cpu);
            out.extend(Vec::<f64>::try_from(p).map_err(Error::from)?);
        }
        Ok(out)
    }

    fn change_quality(&self, images: &[Image], pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        if pairs.iter().any(|&(a, b)| a >= images.len() || b >= images.len()) {
            return Err(Error::invalid("change pair index out of range"));
        }
        // Embed each image once; pairs then only touch the small head.
        let (mu, _) = self.cd.dvae.encode_means(images, self.batch);
        let mut out = Vec::with_capacity(pairs.len());
        tch::no_grad(|| -> Result<()> {
            for chunk in pairs.chunks(self.batch.max(1) * 8) {
                let ia: Vec<i64> = chunk.iter().map(|p| p.0 as i64).collect();
                let ib: Vec<i64> = chunk.iter().map(|p| p.1 as i64).collect();
                let za = mu.index_select(0, &Tensor::from_slice(&ia).to_device(mu.device()));
                let zb = mu.index_select(0, &Tensor::from_slice(&ib).to_device(mu.device()));
                let l = self.cd.disc_logits(&za, &zb, false);
                let p = l.softmax(-1, Kind::Double).select(1, 1).to_device(tch::Device::Cpu);
                out.extend(Vec::<f64>::try_from(p).map_err(Error::from)?);
            }
            Ok(())
        })?;
        Ok(out)
    }
}

/// Embeddings and class probabilities of candidate exemplars.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExemplarPool {
    pub mu_y: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
}

fn tensor_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let t = t.to_kind(Kind::Double).to_device(tch::Device::Cpu);
    let (n, w) = (t.size()[0], t.size()[1] as usize);
    let flat = Vec::<f64>::try_from(t.reshape([-1])).map_err(Error::from)?;
    Ok(if n == 0 { Vec::new() } else { flat.chunks(w).map(<[f64]>::to_vec).collect() })
}

impl ExemplarPool {
    pub fn from_model(model: &Dvae, images: &[Image], batch: usize) -> Result<ExemplarPool> {
        let (mu, _) = model.encode_means(images, batch);
        let probs = tch::no_grad(|| model.class_probs(&mu));
        Ok(ExemplarPool {
            mu_y: tensor_rows(&mu)?,
            probs: tensor_rows(&probs)?,
        })
    }

    pub fn len(&self) -> usize {
        self.mu_y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu_y.is_empty()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The pool entry closest to the query in class-latent space among those
/// whose probability for `target` exceeds `t`; ties go to the lower index.
pub fn select_exemplar(query: &[f64], pool: &ExemplarPool, target: usize, t: f64) -> Result<usize> {
    if pool.is_empty() || pool.probs.len() != pool.len() {
        return Err(Error::invalid("exemplar pool is empty or inconsistent"));
    }
    let mut best: Option<(f64, usize)> = None;
    for (i, (mu, pr)) in pool.mu_y.iter().zip(&pool.probs).enumerate() {
        check_widths(query, mu)?;
        let p = *pr
            .get(target)
            .ok_or_else(|| Error::invalid(format!("target class {target} out of range")))?;
        if p > t {
            let d = sq_dist(query, mu);
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
    }
    best.map(|b| b.1).ok_or(Error::NoExemplar { class: target, threshold: t })
}

/// The second most likely class (lower index on ties).
pub fn second_most_likely(probs: &[f64]) -> Result<usize> {
    if probs.len() < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&i, &j| probs[j].total_cmp(&probs[i]).then(i.cmp(&j)));
    Ok(idx[1])
}

fn with_dims(a: &[f64], b: &[f64], dims: &[usize], mask: u32) -> Vec<f64> {
    let mut z = a.to_vec();
    for (bit, &d) in dims.iter().enumerate() {
        if mask & (1 << bit) != 0 {
            z[d] = b[d];
        }
    }
    z
}

/// The graph with its node latents and decoded node images.
pub struct BuiltGraph {
    pub graph: InterpGraph,
    pub latents: Vec<Vec<f64>>,
    pub images: Vec<Image>,
}

/// Decodes every node once, scores every node with D and every edge with
/// CD, and weights edges accordingly.
pub fn build_interp_graph(
    a: &[f64],
    b: &[f64],
    mu_x: &[f64],
    decoder: &dyn LatentDecoder,
    critic: &dyn Critic,
    p: &GraphParams,
) -> Result<BuiltGraph> {
    check_widths(a, b)?;
    p.validate()?;
    let thr = p.graph_threshold();
    let dims: Vec<usize> = (0..a.len()).filter(|&i| (a[i] - b[i]).abs() > thr).collect();
    if dims.len() > MAX_GRAPH_DIMS {
        return Err(Error::invalid(format!("graph over {} dimensions is too large", dims.len())));
    }
    let latents: Vec<Vec<f64>> = (0..1u32 << dims.len()).map(|m| with_dims(a, b, &dims, m)).collect();
    let images = decoder.decode_states(&latents, mu_x)?;
    let pairs: Vec<(usize, usize)> = lattice_edges(dims.len())
        .into_iter()
        .map(|(s, t)| (s as usize, t as usize))
        .collect();
    let real = critic.realism(&images)?;
    let good = critic.change_quality(&images, &pairs)?;
    if real.len() != images.len() || good.len() != pairs.len() {
        return Err(Error::invalid("critic returned the wrong number of scores"));
    }
    let mut k = 0;
    let graph = InterpGraph::with_weights(dims, |s, t| {
        let w = edge_weight(real[t as usize], good[k], (t & !s).count_ones() as usize, p);
        k += 1;
        w
    })?;
    Ok(BuiltGraph { graph, latents, images })
}

fn dims_of(dims: &[usize], mask: u32) -> Vec<usize> {
    dims.iter()
        .enumerate()
        .filter(|(bit, _)| mask & (1 << bit) != 0)
        .map(|(_, &d)| d)
        .collect()
}

/// Explanation from `a` to `b` with the residual latent `mu_x` held fixed.
/// Identical embeddings give a zero-step explanation.
pub fn explain_latents(
    a: &[f64],
    b: &[f64],
    mu_x: &[f64],
    method: Method,
    decoder: &dyn LatentDecoder,
    critic: Option<&dyn Critic>,
    p: &GraphParams,
) -> Result<Explanation> {
    check_widths(a, b)?;
    let mut latents = vec![a.to_vec()];
    let mut changed = Vec::new();
    let mut edge_costs = Vec::new();
    let mut states = Vec::new();
    if a != b {
        match method {
            Method::Smooth => {
                let all = differing(a, b);
                for z in interp_smooth(a, b)? {
                    latents.push(z);
                    changed.push(all.clone());
                }
            }
            Method::Dim => {
                let (zs, ch) = interp_dim(a, b, SIGNIFICANT_DELTA)?;
                latents.extend(zs);
                changed = ch;
            }
            Method::Graph => {
                let critic = critic.ok_or_else(|| Error::invalid("graph method needs D and CD"))?;
                let built = build_interp_graph(a, b, mu_x, decoder, critic, p)?;
                let path = shortest_path(&built.graph);
                states.push(built.images[0].clone());
                for w in path.nodes.windows(2) {
                    changed.push(dims_of(&built.graph.dims, w[1] & !w[0]));
                    latents.push(built.latents[w[1] as usize].clone());
                    states.push(built.images[w[1] as usize].clone());
                }
                edge_costs = path.edge_costs;
            }
        }
    }
    if states.is_empty() {
        states = decoder.decode_states(&latents, mu_x)?;
    }
    Ok(Explanation {
        method,
        latents,
        changed,
        edge_costs,
        mu_x: mu_x.to_vec(),
        exemplar: None,
        states,
    })
}

/// What to contrast the query against.
#[derive(Clone, Debug)]
pub enum Target {
    /// The query's second most likely class.
    Auto,
    Class(usize),
    Image(Image),
}

/// Everything `explain` needs besides the query.
pub struct Bundle<'a> {
    pub model: &'a Dvae,
    pub critic: Option<&'a dyn Critic>,
    pub pool: Option<&'a ExemplarPool>,
}

/// Encodes the query, finds the exemplar (unless given as an image), and
/// walks between their class latents.
pub fn explain(query: &Image, target: &Target, bundle: &Bundle<'_>, method: Method, p: &GraphParams) -> Result<Explanation> {
    p.validate()?;
    let model = bundle.model;
    let (mu_y, mu_x) = model.encode_means(std::slice::from_ref(query), 1);
    let a = tensor_rows(&mu_y)?.remove(0);
    let mu_x = tensor_rows(&mu_x)?.remove(0);
    let (b, exemplar) = match target {
        Target::Image(img) => (tensor_rows(&model.encode_means(std::slice::from_ref(img), 1).0)?.remove(0), None),
        Target::Auto | Target::Class(_) => {
            let pool = bundle.pool.ok_or_else(|| Error::invalid("target-class mode needs an exemplar pool"))?;
            let class = match target {
                Target::Class(c) => *c,
                _ => second_most_likely(&tensor_rows(&tch::no_grad(|| model.class_probs(&mu_y)))?[0])?,
            };
            let idx = select_exemplar(&a, pool, class, p.t)?;
            (pool.mu_y[idx].clone(), Some(idx))
        }
    };
    let mut e = explain_latents(&a, &b, &mu_x, method, model, bundle.critic, p)?;
    e.exemplar = exemplar;
    Ok(e)
}

#[cfg(test)]
mod tests;
